use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range for size {size} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; build a new graph")]
    BackwardTwice,
    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("table has no header cells")]
    EmptyHeader,
    #[error("empty header cell at column {0}")]
    EmptyHeaderCell(usize),
    #[error("row {row} has {got} cells, header has {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("duplicate pair id {0:?}")]
    DuplicateId(String),
    #[error("pair {0:?} has empty text")]
    EmptyText(String),
    #[error("corpus of {0} pairs is too small to split")]
    CorpusTooSmall(usize),
    #[error("invalid value for {name}: {reason}")]
    InvalidConfig { name: &'static str, reason: String },

    #[error("modality {modality} requires {missing}")]
    MissingInput {
        modality: &'static str,
        missing: &'static str,
    },
    #[error("no table budget: text of {text_len} tokens leaves no room for a table cell in {max_len} positions")]
    NoTableBudget { text_len: usize, max_len: usize },
    #[error("table has {got} columns, model supports {max}")]
    TooManyColumns { got: usize, max: usize },
    #[error("channel {channel} value {value} out of range (cardinality {cardinality})")]
    ChannelRange {
        channel: &'static str,
        value: usize,
        cardinality: usize,
    },
    #[error("input length {got} does not match model length {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("token id {id} out of vocabulary range {vocab_size}")]
    TokenRange { id: usize, vocab_size: usize },
    #[error("mean pooling over an input with no real positions")]
    EmptyPool,
    #[error("contrastive loss needs at least one row")]
    EmptyBatch,
    #[error("parameter {0:?} missing or has the wrong shape")]
    ParamLayout(String),

    #[error("gradient of parameter {0:?} is not finite")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("corpus of {corpus} pairs has no full batch of {batch}")]
    NoFullBatch { corpus: usize, batch: usize },
    #[error("hard negative {table:?} for query {query:?} is the gold table")]
    HardNegativeIsGold { query: String, table: String },
    #[error("hard negative {table:?} for query {query:?} is not in the table pool")]
    UnknownTable { query: String, table: String },
    #[error("query {0:?} has no gold table")]
    MissingGold(String),
    #[error("table {id:?}: {source}")]
    InTable { id: String, source: alloc::boxed::Box<Error> },
    #[error("duplicate table id {0:?} in index")]
    DuplicateTable(String),
    #[error("retrieval index is empty")]
    EmptyIndex,
    #[error("{what} length mismatch: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("QA example {id:?}: {reason}")]
    BadQaExample { id: String, reason: String },
    #[error("{0}")]
    Observer(String),
}
