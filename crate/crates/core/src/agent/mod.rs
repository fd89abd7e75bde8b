//! Agent definitions, prompt assembly, structured output and hand-raising.

pub mod handraise;
pub mod prompt;
pub mod spec;
pub mod structured;

pub use handraise::*;
pub use prompt::*;
pub use spec::*;
pub use structured::*;
