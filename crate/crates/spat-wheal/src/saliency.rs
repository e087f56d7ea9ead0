#[derive(Debug, thiserror::Error)]
pub enum SaliencyError {}
