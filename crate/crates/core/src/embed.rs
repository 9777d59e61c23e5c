//! Client for an external embedding service (`POST /embed`, `GET /healthz`).
//!
//! Vectors come back unit-normalized; the client checks count, dimension
//! and norm before handing them out.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::store::{l2_norm, Modality, UNIT_NORM_TOLERANCE};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding service unreachable: {0}")]
    Unreachable(String),
    #[error("embedding service sent an unusable response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedItem {
    pub id: u64,
    pub kind: Modality,
    /// Base64 image bytes or raw text.
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub items: Vec<EmbedItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    pub vectors: Vec<Vec<f32>>,
}

pub struct EmbedClient {
    base_url: String,
    agent: ureq::Agent,
}

impl EmbedClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        EmbedClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    pub fn healthy(&self) -> bool {
        matches!(self.agent.get(&format!("{}/healthz", self.base_url)).call(), Ok(r) if r.status() == 200)
    }

    pub fn embed(&self, items: &[EmbedItem]) -> Result<EmbedResponse, EmbedError> {
        let body = EmbedRequest { items: items.to_vec() };
        let resp = match self.agent.post(&format!("{}/embed", self.base_url)).send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, _)) => return Err(EmbedError::Unreachable(format!("HTTP {code}"))),
            Err(ureq::Error::Transport(t)) => return Err(EmbedError::Unreachable(t.to_string())),
        };
        let resp: EmbedResponse = resp
            .into_json()
            .map_err(|e| EmbedError::BadResponse(e.to_string()))?;
        validate(&resp, items.len())?;
        Ok(resp)
    }
}

fn validate(resp: &EmbedResponse, expected: usize) -> Result<(), EmbedError> {
    if resp.vectors.len() != expected {
        return Err(EmbedError::BadResponse(format!(
            "{} vectors for {expected} items",
            resp.vectors.len()
        )));
    }
    if resp.dim == 0 {
        return Err(EmbedError::BadResponse("dimension 0".into()));
    }
    for (i, v) in resp.vectors.iter().enumerate() {
        if v.len() != resp.dim {
            return Err(EmbedError::BadResponse(format!("vector {i} has length {}", v.len())));
        }
        if (l2_norm(v) - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmbedError::BadResponse(format!("vector {i} is not unit length")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_shape() {
        let req = EmbedRequest {
            items: vec![EmbedItem {
                id: 3,
                kind: Modality::Text,
                payload: "a photo of a cat".into(),
            }],
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"items":[{"id":3,"kind":"text","payload":"a photo of a cat"}]}"#
        );
    }

    #[test]
    fn validation() {
        let ok = EmbedResponse {
            dim: 2,
            vectors: vec![vec![0.6, 0.8]],
        };
        assert!(validate(&ok, 1).is_ok());
        assert!(validate(&ok, 2).is_err());
        let short = EmbedResponse {
            dim: 3,
            vectors: vec![vec![0.6, 0.8]],
        };
        assert!(validate(&short, 1).is_err());
        let long = EmbedResponse {
            dim: 2,
            vectors: vec![vec![1.0, 1.0]],
        };
        assert!(validate(&long, 1).is_err());
    }
}
