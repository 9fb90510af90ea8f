//! Reference adapter for an external box-promptable segmenter.
//!
//! Wire contract (JSON in both directions, same for both backends):
//!
//! ```text
//! request  {"image_id": str, "width": u32, "height": u32,
//!           "image_png": base64 PNG (RGB),
//!           "box_xyxy": [x0, y0, x1, y1],   // pixels, half-open
//!           "class_id": u32, "multimask_output": false}
//! response {"masks": [{"score": f64, "mask_png": base64 PNG}]}
//!        | {"error": str}
//! ```
//!
//! Mask PNGs must match the image size; any nonzero pixel is foreground. When
//! several masks come back, the highest-scoring one is used.
//!
//! `Backend::Http` POSTs the request to the endpoint URL. `Backend::Command`
//! runs a local program (for example a checkpoint runner), writing the request
//! to its stdin and reading the response from its stdout.

use std::io::{Cursor, Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::ImageFormat;
use serde::{Deserialize, Serialize};

use super::{Teacher, TeacherRequest};
use crate::error::{Error, Result};
use crate::labels::BinaryMask;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backend {
    Http(String),
    Command(PathBuf),
}

#[derive(Debug, Serialize)]
pub struct SegmentRequest<'a> {
    pub image_id: &'a str,
    pub width: u32,
    pub height: u32,
    pub image_png: String,
    pub box_xyxy: [u32; 4],
    pub class_id: u32,
    pub multimask_output: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredMask {
    #[serde(default)]
    pub score: f64,
    pub mask_png: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SegmentResponse {
    #[serde(default)]
    pub masks: Vec<ScoredMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct FoundationTeacher {
    backend: Backend,
    timeout: Duration,
    retries: u32,
    agent: ureq::Agent,
}

impl FoundationTeacher {
    pub fn new(backend: Backend, timeout: Duration, retries: u32) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        FoundationTeacher {
            backend,
            timeout,
            retries,
            agent,
        }
    }

    fn call_once(&self, body: &str) -> Result<SegmentResponse> {
        match &self.backend {
            Backend::Http(url) => {
                let resp = self
                    .agent
                    .post(url)
                    .set("Content-Type", "application/json")
                    .send_string(body);
                match resp {
                    Ok(r) => {
                        let text = r
                            .into_string()
                            .map_err(|e| retriable(format!("reading response: {e}")))?;
                        parse_response(&text)
                    }
                    Err(ureq::Error::Status(code, r)) => {
                        let detail = r.into_string().unwrap_or_default();
                        Err(Error::Teacher {
                            message: format!("HTTP {code} from {url}: {detail}"),
                            retriable: code >= 500 || code == 429,
                        })
                    }
                    Err(ureq::Error::Transport(t)) => Err(retriable(format!("{url}: {t}"))),
                }
            }
            Backend::Command(cmd) => {
                let mut child = Command::new(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::piped())
                    .spawn()
                    .map_err(|e| retriable(format!("spawning {}: {e}", cmd.display())))?;
                child
                    .stdin
                    .take()
                    .expect("stdin piped")
                    .write_all(body.as_bytes())
                    .map_err(|e| retriable(format!("writing to {}: {e}", cmd.display())))?;
                let mut out = String::new();
                child
                    .stdout
                    .take()
                    .expect("stdout piped")
                    .read_to_string(&mut out)
                    .map_err(|e| retriable(format!("reading from {}: {e}", cmd.display())))?;
                let status = child.wait()?;
                if !status.success() {
                    return Err(retriable(format!("{} exited with {status}", cmd.display())));
                }
                parse_response(&out)
            }
        }
    }
}

fn retriable(message: String) -> Error {
    Error::Teacher {
        message,
        retriable: true,
    }
}

fn parse_response(text: &str) -> Result<SegmentResponse> {
    let resp: SegmentResponse = serde_json::from_str(text).map_err(|e| Error::Teacher {
        message: format!("malformed teacher response: {e}"),
        retriable: false,
    })?;
    if let Some(err) = &resp.error {
        return Err(Error::Teacher {
            message: err.clone(),
            retriable: false,
        });
    }
    Ok(resp)
}

/// Picks the highest-scoring mask and decodes it.
pub fn best_mask(resp: &SegmentResponse, width: u32, height: u32) -> Result<BinaryMask> {
    let best = resp
        .masks
        .iter()
        .max_by(|a, b| a.score.total_cmp(&b.score))
        .ok_or_else(|| Error::Teacher {
            message: "teacher returned no mask".into(),
            retriable: false,
        })?;
    let bytes = B64.decode(&best.mask_png).map_err(|e| Error::Teacher {
        message: format!("mask is not valid base64: {e}"),
        retriable: false,
    })?;
    let mask = BinaryMask::from_png_bytes(&bytes)?;
    if mask.dims() != (width, height) {
        return Err(Error::Teacher {
            message: format!(
                "mask is {}x{}, image is {width}x{height}",
                mask.width(),
                mask.height()
            ),
            retriable: false,
        });
    }
    Ok(mask)
}

impl Teacher for FoundationTeacher {
    fn fingerprint(&self) -> String {
        match &self.backend {
            Backend::Http(url) => format!("foundation:{url}"),
            Backend::Command(cmd) => format!("foundation:{}", cmd.display()),
        }
    }

    fn segment(&self, req: &TeacherRequest<'_>) -> Result<BinaryMask> {
        let (w, h) = req.image.dimensions();
        let mut png = Cursor::new(Vec::new());
        req.image.write_to(&mut png, ImageFormat::Png)?;
        let r = req.pixel_box;
        let body = serde_json::to_string(&SegmentRequest {
            image_id: req.image_id,
            width: w,
            height: h,
            image_png: B64.encode(png.into_inner()),
            box_xyxy: [r.x0, r.y0, r.x1, r.y1],
            class_id: req.class_id,
            multimask_output: false,
        })?;
        let mut attempt = 0;
        loop {
            match self.call_once(&body) {
                Ok(resp) => return best_mask(&resp, w, h),
                Err(Error::Teacher {
                    retriable: true,
                    message,
                }) if attempt < self.retries => {
                    attempt += 1;
                    log::warn!(
                        "teacher attempt {attempt} failed for `{}`: {message}",
                        req.image_id
                    );
                    std::thread::sleep(
                        Duration::from_millis(50 * attempt as u64).min(self.timeout),
                    );
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoded(mask: &BinaryMask) -> String {
        B64.encode(mask.to_png_bytes().unwrap())
    }

    #[test]
    fn highest_score_wins() {
        let mut a = BinaryMask::new(4, 4);
        a.set(0, 0, true);
        let mut b = BinaryMask::new(4, 4);
        b.set(3, 3, true);
        let resp = SegmentResponse {
            masks: vec![
                ScoredMask {
                    score: 0.2,
                    mask_png: encoded(&a),
                },
                ScoredMask {
                    score: 0.9,
                    mask_png: encoded(&b),
                },
            ],
            error: None,
        };
        assert_eq!(best_mask(&resp, 4, 4).unwrap(), b);
        assert!(best_mask(&resp, 5, 4).is_err());
        assert!(best_mask(&SegmentResponse::default(), 4, 4).is_err());
    }

    #[test]
    fn error_payload_is_not_retriable() {
        let err = parse_response(r#"{"error":"model not loaded"}"#).unwrap_err();
        assert!(matches!(
            err,
            Error::Teacher {
                retriable: false,
                ..
            }
        ));
    }
}
