//! Modeling language, simulation engine and NetLogo emitter for
//! agent-based models with disease and traffic-signal extensions.

pub mod codegen;
pub mod disease;
pub mod dsl;
pub mod engine;
pub mod expr;
pub mod metamodel;
pub mod statemachine;
pub mod traffic;
