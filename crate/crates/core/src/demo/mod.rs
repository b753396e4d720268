//! End-to-end demonstration: a cookie-authenticating SP, a mock
//! authentication personal service, a scriptable browser and the scenario
//! harness that wires them to a Broker and a proxy.

mod browser;
mod scenario;
mod service;
mod sp;

use sha2::{Digest, Sha256};

pub use browser::{Browser, BrowserError, Form, Page};
pub use scenario::{
    run_scenario, CatalogVariant, Deployment, DeploymentSpec, ScenarioError, ScenarioReport, CC_SERVICE_ID,
    HAPPY_PHASES, SCENARIOS,
};
pub use service::{demo_service_handler, run_demo_service, DEMO_IDENTITY};
pub use sp::{CallbackObservation, DemoSp, SpMode, SESSION_COOKIE};

/// The two-attribute white-pages query the demo SP issues.
pub const AUTH_QUERY: &str = r#"{"Purpose":"authentication","Device":"Portuguese eID"}"#;

/// Proof of the mock authentication: binds the SP's nonce to the identity.
pub fn mock_proof(nonce: &str, identity: &str) -> String {
    let mut h = Sha256::new();
    h.update(b"psvc-demo-auth\0");
    h.update(nonce.as_bytes());
    h.update(b"\0");
    h.update(identity.as_bytes());
    hex::encode(h.finalize())
}

fn random_token() -> String {
    hex::encode(rand::random::<[u8; 16]>())
}

fn form_fields(body: &[u8]) -> Vec<(String, String)> {
    url::form_urlencoded::parse(body).into_owned().collect()
}

fn field<'a>(fields: &'a [(String, String)], name: &str) -> Option<&'a str> {
    fields.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
}
