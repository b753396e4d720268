use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{header_json, ProtocolError, ServiceHandle, ServiceName, WhiteQuery, YellowQuery};

const OP_YELLOW: &str = "Yellow Pages";
const OP_WHITE: &str = "White Pages";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteResolution {
    pub service: ServiceName,
    pub handle: ServiceHandle,
}

/// The result envelope a Broker sends back to a service provider.
///
/// A white-pages result with no resolution is the "empty result" the proxy
/// delivers when the Broker cannot be reached; it encodes as
/// `"response": null`.
#[derive(Debug, Clone, PartialEq)]
pub enum BrokerResult {
    YellowPages {
        request: YellowQuery,
        response: Vec<ServiceName>,
    },
    WhitePages {
        request: WhiteQuery,
        response: Option<WhiteResolution>,
    },
}

impl BrokerResult {
    pub fn operation(&self) -> &'static str {
        match self {
            Self::YellowPages { .. } => OP_YELLOW,
            Self::WhitePages { .. } => OP_WHITE,
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Self::YellowPages { response, .. } => response.is_empty(),
            Self::WhitePages { response, .. } => response.is_none(),
        }
    }

    fn to_value(&self) -> Value {
        match self {
            Self::YellowPages { request, response } => json!({
                "operation": OP_YELLOW,
                "request": request.to_name(),
                "response": response,
            }),
            Self::WhitePages { request, response } => json!({
                "operation": OP_WHITE,
                "request": request.attributes(),
                "response": response,
            }),
        }
    }
}

/// Encodes a result as a single-line, ASCII-only `PSvc-Service` value.
pub fn encode_broker_result(result: &BrokerResult) -> String {
    header_json(&result.to_value())
}

pub fn decode_broker_result(text: &str) -> Result<BrokerResult, ProtocolError> {
    #[derive(Deserialize)]
    struct Envelope {
        operation: String,
        request: ServiceName,
        response: Value,
    }

    let bad = |e: serde_json::Error| ProtocolError::Payload(e.to_string());
    let env: Envelope = serde_json::from_str(text).map_err(bad)?;
    match env.operation.as_str() {
        OP_YELLOW => Ok(BrokerResult::YellowPages {
            request: YellowQuery::from_name(env.request)?,
            response: serde_json::from_value(env.response).map_err(bad)?,
        }),
        OP_WHITE => Ok(BrokerResult::WhitePages {
            request: WhiteQuery::new(env.request)?,
            response: serde_json::from_value(env.response).map_err(bad)?,
        }),
        other => Err(ProtocolError::Payload(format!("unknown operation `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_yellow_envelope() {
        let r = BrokerResult::YellowPages {
            request: YellowQuery::new("Purpose", "authentication"),
            response: vec![],
        };
        assert_eq!(
            encode_broker_result(&r),
            r#"{"operation":"Yellow Pages","request":{"Purpose":"authentication"},"response":[]}"#
        );
    }

    #[test]
    fn white_envelope_shape() {
        let name = ServiceName::new().with("Purpose", "authentication").with("Device", "Portuguese eID");
        let r = BrokerResult::WhitePages {
            request: WhiteQuery::new(name.clone()).unwrap(),
            response: Some(WhiteResolution {
                service: name,
                handle: ServiceHandle::from_text("h4nd1e"),
            }),
        };
        let text = encode_broker_result(&r);
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["operation"], "White Pages");
        assert_eq!(v["response"]["handle"], "h4nd1e");
        assert_eq!(v["response"]["service"]["Device"], "Portuguese eID");
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["operation", "request", "response"]);
        assert_eq!(decode_broker_result(&text).unwrap(), r);
    }

    #[test]
    fn rejects_unknown_operation() {
        assert!(decode_broker_result(r#"{"operation":"Blue Pages","request":{"a":1},"response":[]}"#).is_err());
    }

    fn leaf() -> impl Strategy<Value = Value> {
        prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(|n| json!(n)),
            "[a-zA-Zãé \n\"\\\\]{0,12}".prop_map(Value::String),
        ]
    }

    fn value() -> impl Strategy<Value = Value> {
        leaf().prop_recursive(2, 8, 3, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..3).prop_map(Value::Array),
                proptest::collection::btree_map("[a-z]{1,4}", inner, 0..3)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    fn name(min: usize) -> impl Strategy<Value = ServiceName> {
        proptest::collection::btree_map("[A-Za-z ã]{1,8}", value(), min..5)
            .prop_map(|m| ServiceName::from_map(m.into_iter().collect()))
    }

    fn result() -> impl Strategy<Value = BrokerResult> {
        prop_oneof![
            (("[A-Za-z]{1,8}", value()), proptest::collection::vec(name(0), 0..4)).prop_map(
                |((a, v), response)| BrokerResult::YellowPages {
                    request: YellowQuery::new(a, v),
                    response,
                }
            ),
            (name(1), proptest::option::of((name(0), "[A-Za-z0-9_-]{1,40}"))).prop_map(|(q, r)| {
                BrokerResult::WhitePages {
                    request: WhiteQuery::new(q).unwrap(),
                    response: r.map(|(service, h)| WhiteResolution {
                        service,
                        handle: ServiceHandle::from_text(h),
                    }),
                }
            }),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(r in result()) {
            let text = encode_broker_result(&r);
            prop_assert!(!text.contains('\n') && !text.contains('\r'));
            prop_assert!(http::HeaderValue::from_str(&text).is_ok());
            prop_assert_eq!(decode_broker_result(&text).unwrap(), r);
        }

        #[test]
        fn name_round_trip(n in name(0)) {
            prop_assert_eq!(ServiceName::parse(&n.to_header_json()).unwrap(), n);
        }
    }
}
