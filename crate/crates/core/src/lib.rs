//! OFDM channel-estimation workbench.
//!
//! A slot-level link simulator ([`baseband`], [`channel`]), LS and MMSE
//! baselines ([`estimators`]), the MambaNet estimator ([`mambanet`]) built on
//! a small reverse-mode autodiff engine ([`tensor`]), training
//! ([`training`]) and Monte Carlo evaluation ([`eval`]).

pub mod baseband;
pub mod channel;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod mambanet;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use baseband::{BasebandConfig, GridKind, SlotGrid};
pub use channel::{ChannelRealization, FrequencyResponse, PowerDelayProfile};
pub use error::{Error, Result};
pub use estimators::PilotLsGrid;
pub use eval::{Estimator, SweepReport, SweepSpec};
pub use mambanet::{MambaNetConfig, MambaNetParams};
pub use tensor::{Checkpoint, ParamSet, Tensor};
pub use training::{DataSpec, Dataset, TrainConfig};
