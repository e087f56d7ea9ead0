#[derive(Debug, thiserror::Error)]
pub enum MetricsError {}
