pub mod apc;
pub mod bootstrap;
pub mod cli;
pub mod estimators;
pub mod fullmodel;
pub mod glm;
pub mod lag;
pub mod linalg;
pub mod optim;
pub mod registry;
pub mod simulator;
pub mod spline;
