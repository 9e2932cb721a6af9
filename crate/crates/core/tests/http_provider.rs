use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use lora_override::adapter::AdapterTransform;
use lora_override::provider::{
    generate_via_provider, AdapterPlan, GenerationRequest, GenerationResponse, HttpProvider,
    Provider,
};
use lora_override::ProviderError;
use tiny_http::{Header, Response, Server};

/// Serves `replies` in order, forwarding each request body to the returned channel.
fn stub(
    replies: Vec<(u16, String, Duration)>,
) -> (String, mpsc::Receiver<(String, String, Option<String>)>) {
    let server = Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body, delay) in replies {
            let Ok(mut req) = server.recv() else { return };
            let mut text = String::new();
            req.as_reader().read_to_string(&mut text).unwrap();
            let auth = req
                .headers()
                .iter()
                .find(|h| h.field.equiv("Authorization"))
                .map(|h| h.value.to_string());
            tx.send((req.url().to_string(), text, auth)).ok();
            thread::sleep(delay);
            let header = Header::from_bytes("Content-Type", "application/json").unwrap();
            req.respond(
                Response::from_string(body)
                    .with_status_code(status)
                    .with_header(header),
            )
            .ok();
        }
    });
    (url, rx)
}

fn ok(body: &GenerationResponse) -> (u16, String, Duration) {
    (200, serde_json::to_string(body).unwrap(), Duration::ZERO)
}

#[test]
fn round_trip_is_exact() {
    let reply = GenerationResponse {
        text: "Lyon".into(),
        tokens: vec!["Ly".into(), "on".into()],
        token_logprobs: Some(vec![-0.125, -1.5e-3]),
        first_token_top_prob: Some(0.8125),
    };
    let (url, rx) = stub(vec![ok(&reply)]);
    let provider = HttpProvider::new(format!("{url}/"))
        .with_logprobs(true)
        .with_bearer_token("tok");
    let mut request = GenerationRequest::greedy("capital of France?", 8);
    request.want_logprobs = true;
    request.seed = 17;
    let plan = AdapterPlan {
        document_id: "doc7".into(),
        document: "ignored remotely".into(),
        transform: AdapterTransform::selective(25.0, 1.75),
    };
    let got = generate_via_provider(&provider, &request, Some(&plan)).unwrap();
    assert_eq!(got, reply);

    let (path, body, auth) = rx.recv().unwrap();
    assert_eq!(path, "/generate");
    assert_eq!(auth.as_deref(), Some("Bearer tok"));
    let sent: GenerationRequest = serde_json::from_str(&body).unwrap();
    assert_eq!(sent.prompt, request.prompt);
    assert_eq!(sent.seed, 17);
    assert_eq!(
        sent.adapter_ref.as_deref(),
        Some("doc7@boost:k=25,beta=1.75,target=a,select=top")
    );
}

#[test]
fn logprobs_on_text_only_endpoint_is_a_capability_error() {
    let provider = HttpProvider::new("http://127.0.0.1:9");
    assert!(!provider.capabilities().logprobs);
    let mut request = GenerationRequest::greedy("q", 4);
    request.want_logprobs = true;
    assert!(matches!(
        provider.generate(&request, None),
        Err(ProviderError::Capability(_))
    ));
}

#[test]
fn non_success_status_is_reported() {
    let (url, _rx) = stub(vec![(503, "{}".into(), Duration::ZERO)]);
    let provider = HttpProvider::new(url);
    let err = provider
        .generate(&GenerationRequest::greedy("q", 4), None)
        .unwrap_err();
    assert!(matches!(err, ProviderError::Status(503)), "{err:?}");
}

#[test]
fn slow_endpoint_times_out() {
    let reply = GenerationResponse {
        text: "late".into(),
        tokens: vec!["late".into()],
        token_logprobs: None,
        first_token_top_prob: None,
    };
    let (url, _rx) = stub(vec![(
        200,
        serde_json::to_string(&reply).unwrap(),
        Duration::from_millis(800),
    )]);
    let provider = HttpProvider::with_timeout(url, Duration::from_millis(150));
    let err = provider
        .generate(&GenerationRequest::greedy("q", 4), None)
        .unwrap_err();
    assert!(matches!(err, ProviderError::Timeout), "{err:?}");
}

#[test]
fn malformed_responses_are_rejected() {
    let mismatched = GenerationResponse {
        text: "a b".into(),
        tokens: vec!["a".into(), "b".into()],
        token_logprobs: Some(vec![-1.0]),
        first_token_top_prob: None,
    };
    let missing = GenerationResponse {
        token_logprobs: None,
        ..mismatched.clone()
    };
    let (url, _rx) = stub(vec![
        ok(&mismatched),
        ok(&missing),
        (200, "not json".into(), Duration::ZERO),
    ]);
    let provider = HttpProvider::new(url).with_logprobs(true);
    let mut request = GenerationRequest::greedy("q", 4);
    request.want_logprobs = true;
    for _ in 0..3 {
        let err = provider.generate(&request, None).unwrap_err();
        assert!(matches!(err, ProviderError::Malformed(_)), "{err:?}");
    }
}

#[test]
fn invalid_request_never_reaches_the_wire() {
    let provider = HttpProvider::new("http://127.0.0.1:9");
    let err =
        generate_via_provider(&provider, &GenerationRequest::greedy("q", 0), None).unwrap_err();
    assert!(matches!(err, ProviderError::InvalidRequest(_)));
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let provider = HttpProvider::with_timeout("http://127.0.0.1:9", Duration::from_secs(2));
    let err = provider
        .generate(&GenerationRequest::greedy("q", 4), None)
        .unwrap_err();
    assert!(
        matches!(err, ProviderError::Transport(_) | ProviderError::Timeout),
        "{err:?}"
    );
}
