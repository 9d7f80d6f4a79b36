//! Federation fabric: who holds which domain, what goes over the wire, how
//! the server merges uploads, and the round loop that ties it together.

pub mod aggregate;
pub mod message;
pub mod partition;
pub mod trainer;

pub use aggregate::{
    fedavg, momentum_aggregate, AggHistory, MomentumRule, Route, RoutingCounters, Server,
};
pub use message::ParamMessage;
pub use partition::{partition_domains, ClientId, Partition};
pub use trainer::{
    aggregation_events, client_data, embed_samples, no_observer, train, ClientData, Corpus,
    FedConfig, FedRun, RoundLog, Schedule, TrainedModel,
};
