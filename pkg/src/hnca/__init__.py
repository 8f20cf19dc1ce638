"""Training networks of discrete stochastic units with unbiased,
variance-reduced gradient estimators, plus desk-scale verification oracles
and experiment harnesses."""

from .errors import ConfigError, DataFormatError, HncaError, NumericError, SizeCapError
from .netcore import (
    BernoulliLayer,
    Encoding,
    ForwardTrace,
    SoftmaxLayer,
    StochasticNet,
    counterfactual_logits,
    counterfactual_sample_probs,
    forward_sample,
    init_net,
    load_net,
    save_net,
)
from .estimators import (
    BaselineState,
    ChildMessages,
    GradEstimate,
    baseline_update,
    hnca_backward,
    reinforce_grad,
    softmax_output_backward,
)
from .fhnca import (
    FhncaMode,
    FunctionComponent,
    FunctionComponentSet,
    RlooVariant,
    VaeModel,
    build_elbo_components,
    component_counterfactuals,
    fhnca_backward,
    init_vae,
    reinforce_downstream,
    reinforce_loo,
)
from .oracle import (
    OracleReport,
    estimator_moments,
    exact_expectation,
    exact_gradient,
    run_verification,
)
from .harness import (
    AdamState,
    Dataset,
    RunMetrics,
    adam_step,
    bandit_train,
    dynamic_binarize,
    load_idx,
    multisample_bound,
    vae_train,
)
from .config import RunConfig, parse_config
from .models import BanditNetClassifier, BernoulliVae

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
