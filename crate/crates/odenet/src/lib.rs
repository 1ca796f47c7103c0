pub mod autodiff;
pub mod basis;
pub mod compress;
pub mod data;
pub mod integrate;
pub mod model;
pub mod odeblock;
pub mod tensor;
pub mod train;
