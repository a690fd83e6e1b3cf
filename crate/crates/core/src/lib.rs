pub mod advisor;
pub mod compreg;
pub mod regraph;
pub mod txlog;
pub mod value;
pub mod interceptor;
pub mod rcmanager;
pub mod runner;
pub mod scenario;
pub mod clock;
pub mod simenv;
pub mod tool;
pub mod trace;
