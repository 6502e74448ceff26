//! Sparse mixture-of-experts assembly, routing, balancing and router-only
//! fine-tuning.

pub mod balance;
pub mod model;
pub mod routing;
pub mod stats;
pub mod train;

pub use balance::{balance_from_parts, balance_value, balancing_loss, first_choice_fractions};
pub use model::{assemble_moe, assemble_upcycled, ForcedExpert, MoeBlock, MoeModel, Routing, TowerOutput};
pub use routing::{route, route_logits, topk_indices, topk_mask, Routes};
pub use stats::{routing_stats, BlockRouting, RoutingStats};
pub use train::{batch_loss, total_loss, train_router, RouterTrainConfig, DEFAULT_ALPHA};
