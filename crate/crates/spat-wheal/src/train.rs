#[derive(Debug, thiserror::Error)]
pub enum TrainError {}
