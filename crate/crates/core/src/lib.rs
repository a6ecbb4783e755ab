pub mod asm;
pub mod corpus;
pub mod lab;
pub mod leakage;
pub mod machine;
pub mod pipeline;
pub mod rewrite;
pub mod tvla;
