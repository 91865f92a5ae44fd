pub mod corpus;
pub mod dialogue;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod recommender;
pub mod retrieval;
pub mod sentiment;
pub mod service;
