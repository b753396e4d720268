//! Mock authentication personal service. `/authenticate` shows a challenge
//! page; confirming it posts a nonce-bound proof back to the SP. `/echo`
//! reports exactly what the service received.

use std::net::SocketAddr;

use bytes::Bytes;
use http::header::{self, HeaderValue};
use http::{Method, Request, Response, StatusCode};
use serde_json::json;
use sha2::{Digest, Sha256};
use url::Url;

use super::{field, form_fields, mock_proof};
use crate::net::{self, Server};
use crate::service_kit::{detect_psvc_invocation, html_escape, respond_with_sp_return, ReturnStyle, ServiceContext};

pub const DEMO_IDENTITY: &str = "demo-citizen";

pub async fn run_demo_service(ctx: ServiceContext) -> std::io::Result<Server> {
    let base = ctx.base_url();
    ctx.serve(move |req, peer| {
        let base = base.clone();
        async move { demo_service_handler(&base, req, peer) }
    })
    .await
}

pub fn demo_service_handler(base: &Url, req: Request<Bytes>, _peer: SocketAddr) -> Response<Bytes> {
    match (req.method().clone(), req.uri().path()) {
        (Method::GET, "/authenticate") => challenge(base, &req),
        (Method::POST, "/confirm") => confirm(&req),
        (_, "/echo") => echo(&req),
        _ => net::text_response(StatusCode::NOT_FOUND, "not found\n"),
    }
}

fn challenge(base: &Url, req: &Request<Bytes>) -> Response<Bytes> {
    if !detect_psvc_invocation(req.headers()) {
        return net::text_response(StatusCode::FORBIDDEN, "only handle-based invocations are accepted\n");
    }
    let (Some(nonce), Some(ret)) = (net::query_param(req.uri(), "nonce"), net::query_param(req.uri(), "return"))
    else {
        return net::text_response(StatusCode::BAD_REQUEST, "nonce and return are required\n");
    };
    let action = base.join("/confirm").expect("static path");
    let hidden = |name: &str, value: &str| {
        format!(
            "<input type=\"hidden\" name=\"{}\" value=\"{}\">",
            html_escape(name),
            html_escape(value)
        )
    };
    net::html_response(
        StatusCode::OK,
        format!(
            "<!DOCTYPE html><html><body><h1>Authenticate</h1>\
             <form method=\"post\" action=\"{}\">{}{}{}\
             <button type=\"submit\">Confirm</button></form></body></html>",
            html_escape(action.as_str()),
            hidden("nonce", &nonce),
            hidden("return", &ret),
            hidden("identity", DEMO_IDENTITY),
        ),
    )
}

fn confirm(req: &Request<Bytes>) -> Response<Bytes> {
    let fields = form_fields(req.body());
    let (Some(nonce), Some(identity), Some(ret)) =
        (field(&fields, "nonce"), field(&fields, "identity"), field(&fields, "return"))
    else {
        return net::text_response(StatusCode::BAD_REQUEST, "incomplete confirmation\n");
    };
    let callback = Url::parse(ret).ok();
    let proof = mock_proof(nonce, identity);
    respond_with_sp_return(
        &[("nonce", nonce), ("identity", identity), ("proof", &proof)],
        callback.as_ref(),
        ReturnStyle::AutoPost,
    )
}

fn echo(req: &Request<Bytes>) -> Response<Bytes> {
    let headers: Vec<(String, String)> = req
        .headers()
        .iter()
        .map(|(n, v)| (n.as_str().to_owned(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
        .collect();
    let body = json!({
        "method": req.method().as_str(),
        "path": req.uri().to_string(),
        "headers": headers,
        "body_len": req.body().len(),
        "body_sha256": hex::encode(Sha256::digest(req.body())),
    });
    let mut r = net::response(StatusCode::OK, body.to_string());
    r.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    r
}
