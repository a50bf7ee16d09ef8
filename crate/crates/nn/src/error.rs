use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in loss term `{0}`")]
    NonFinite(String),
    #[error("not an ACEVC1 checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch (truncated or corrupt file)")]
    Checksum,
    #[error("checkpoint config fingerprint {found:016x} does not match expected {expected:016x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("checkpoint is missing entry `{0}`")]
    MissingEntry(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
