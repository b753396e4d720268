//! Discovery and invocation of personal services from Web service providers.
//!
//! A per-user [`broker`] names personal services by their presentation
//! attributes and hands out opaque handles; the [`proxy`] stands in for the
//! browser and turns the 310–313 redirections into Broker calls and service
//! invocations.

pub mod protocol;
pub mod registry;
pub mod net;
pub mod broker;
pub mod demo;
pub mod proxy;
pub mod service_kit;
pub mod transcript;
