"""Deep hedging under distributional (Wasserstein-ball) adversarial attacks."""

from robust_hedge.market_sim import (
    BSSpec,
    GADSpec,
    HestonSpec,
    PathBatch,
    perturb_params_ood,
    simulate,
    simulate_bs,
    simulate_gad,
    simulate_heston,
    variance_swap_curve,
)
from robust_hedge.objective import (
    AsianPut,
    CostSpec,
    CVaR,
    Entropic,
    EuropeanCall,
    dh_loss_batch,
    oce_pointwise_loss,
    payoff,
    pnl,
    risk_value,
)
from robust_hedge.hedge_net import (
    GradientBundle,
    HedgeNetwork,
    OptimizerState,
    apply_update,
    forward,
    init_network,
    loss_and_grads,
)
from robust_hedge.attack import (
    AttackSpec,
    PerturbedBatch,
    empirical_distance,
    pointwise_pgd,
    project_ball,
    run_attack,
    theorem1_step,
    upsilon,
    wbpgd,
    wpgd,
)

__version__ = "0.1.0"

__all__ = [
    "AsianPut",
    "AttackSpec",
    "BSSpec",
    "CVaR",
    "CostSpec",
    "Entropic",
    "EuropeanCall",
    "GADSpec",
    "GradientBundle",
    "HedgeNetwork",
    "HestonSpec",
    "OptimizerState",
    "PathBatch",
    "PerturbedBatch",
    "apply_update",
    "dh_loss_batch",
    "empirical_distance",
    "forward",
    "init_network",
    "loss_and_grads",
    "oce_pointwise_loss",
    "payoff",
    "perturb_params_ood",
    "pnl",
    "pointwise_pgd",
    "project_ball",
    "risk_value",
    "run_attack",
    "simulate",
    "simulate_bs",
    "simulate_gad",
    "simulate_heston",
    "theorem1_step",
    "upsilon",
    "variance_swap_curve",
    "wbpgd",
    "wpgd",
]
