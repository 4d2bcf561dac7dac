//! Blocking HTTP client for the service and a simulated annotator that
//! drives a session over the wire.

use hitta_core::feedback_adapt::HeadTag;
use hitta_core::harness::{oracle_response, StreamReport};
use hitta_core::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;
use ureq::http::Response;
use ureq::{Agent, Body};

use crate::api::{
    ErrorBody, FeedbackRequest, FeedbackResponse, NextResponse, SessionConfig, SessionCreated, SessionStatus,
};
use crate::session_stream;

/// A non-2xx reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpError {
    pub status: u16,
    pub message: String,
}

impl std::fmt::Display for HttpError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "HTTP {}: {}", self.status, self.message)
    }
}

impl std::error::Error for HttpError {}

pub type ClientResult<T> = std::result::Result<T, ClientError>;

#[derive(Debug)]
pub enum ClientError {
    Http(HttpError),
    Transport(String),
    Core(Error),
}

impl std::fmt::Display for ClientError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientError::Http(e) => e.fmt(f),
            ClientError::Transport(e) => write!(f, "transport: {e}"),
            ClientError::Core(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for ClientError {}

impl From<Error> for ClientError {
    fn from(e: Error) -> Self {
        ClientError::Core(e)
    }
}

impl From<ureq::Error> for ClientError {
    fn from(e: ureq::Error) -> Self {
        ClientError::Transport(e.to_string())
    }
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Http(e) => Some(e.status),
            _ => None,
        }
    }
}

pub struct Client {
    base: String,
    agent: Agent,
}

fn decode<T: DeserializeOwned>(mut resp: Response<Body>) -> ClientResult<T> {
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        let message = resp
            .body_mut()
            .read_json::<ErrorBody>()
            .map(|b| b.error)
            .unwrap_or_default();
        return Err(ClientError::Http(HttpError { status, message }));
    }
    Ok(resp.body_mut().with_config().limit(1 << 30).read_json()?)
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        let agent = Agent::config_builder().http_status_as_error(false).build().new_agent();
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> ClientResult<T> {
        decode(self.agent.get(&self.url(path)).call()?)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> ClientResult<T> {
        decode(self.agent.post(&self.url(path)).send_json(body)?)
    }

    pub fn health(&self) -> ClientResult<String> {
        let mut resp = self.agent.get(&self.url("/healthz")).call()?;
        Ok(resp.body_mut().read_to_string()?)
    }

    pub fn create(&self, cfg: &SessionConfig) -> ClientResult<SessionCreated> {
        self.post("/sessions", cfg)
    }

    pub fn status(&self, id: &str) -> ClientResult<SessionStatus> {
        self.get(&format!("/sessions/{id}"))
    }

    pub fn next(&self, id: &str) -> ClientResult<NextResponse> {
        self.get(&format!("/sessions/{id}/next"))
    }

    pub fn feedback(&self, id: &str, req: &FeedbackRequest) -> ClientResult<FeedbackResponse> {
        self.post(&format!("/sessions/{id}/feedback"), req)
    }

    pub fn report(&self, id: &str) -> ClientResult<StreamReport> {
        self.get(&format!("/sessions/{id}/report"))
    }
}

/// Plays the simulated annotator against session `id`, whose config is
/// `cfg`, until the stream is exhausted. Reference masks come from the
/// client's own copy of the dataset.
pub fn drive_oracle(client: &Client, id: &str, cfg: &SessionConfig) -> ClientResult<StreamReport> {
    let (spec, items) = session_stream(cfg)?;
    loop {
        let next = client.next(id)?;
        let Some(payload) = next.sample else { break };
        let item = items
            .get(payload.index)
            .ok_or_else(|| Error::Validation(format!("sample index {} is outside the stream", payload.index)))?;
        if item.sample.id != payload.sample_id {
            return Err(Error::Validation(format!(
                "service served {} where the stream has {}",
                payload.sample_id, item.sample.id
            ))
            .into());
        }
        let presentation = payload.to_presentation()?;
        let req = match oracle_response(&presentation, item.sample.mask(&item.rater)?, &spec)? {
            Some(f) => FeedbackRequest {
                corrected: Some(f.corrected.encode_rle()),
                chosen: Some(f.chosen),
            },
            None => FeedbackRequest {
                corrected: None,
                chosen: Some(HeadTag::Main),
            },
        };
        client.feedback(id, &req)?;
    }
    client.report(id)
}
