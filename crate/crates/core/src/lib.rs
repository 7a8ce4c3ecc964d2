pub mod allocation;
pub mod bidding;
pub mod error;
pub mod landscape;
pub mod multi;
pub mod quadrature;
pub mod roots;
pub mod single_kl;
pub mod sim;
pub mod single_l2;

pub use error::{Error, Result};
pub use landscape::{parse_samples, Landscape, LandscapeKind, PartialMoment};
pub use allocation::{Allocation, AllocationForm};
pub use single_l2::{feasible_spend_range, jacobian, newton_solve_pmin_pmax, solve_l2, Jacobian, Solution, SolveCase, SolverDiagnostics, SpendRange};
pub use single_kl::{kl_divergence, kl_exponential_closed_form, solve_kl};
pub use bidding::{decentralize, l2_strategy, strategy_from_allocation, BidStrategy, PowerPiece};
pub use multi::{is_decentralizable, scale_spends, solve_multi, Contract, ContractSet, MultiAllocation, MultiCase};
pub use sim::{run_auctions, replicate_allocation_experiment, replicate_spend_experiment, ExperimentSettings, SimConfig, SimContract, SimReport};
