use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, CompletionRequest, TemplateId};

/// One canned completion, keyed by template and prompt digest.
///
/// `sample` pins the entry to one draw index. Entries without it answer
/// every draw that has no pinned entry of its own.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub template: TemplateId,
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<u32>,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedFixture {
    pub entries: Vec<FixtureEntry>,
}

impl ScriptedFixture {
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Merges every `*.json` fixture in a directory, in file-name order.
    pub fn load_dir(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut out = ScriptedFixture::default();
        for p in paths {
            out.entries.extend(ScriptedFixture::load(p)?.entries);
        }
        Ok(out)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("fixture serializes")
    }

    pub fn push(&mut self, template: TemplateId, digest: impl Into<String>, response: impl Into<String>) {
        self.entries.push(FixtureEntry {
            template,
            digest: digest.into(),
            sample: None,
            response: response.into(),
        });
    }
}

/// Deterministic backend replaying a [`ScriptedFixture`].
///
/// Lookups depend only on the request content, never on call order, so
/// concurrent callers observe the same answers.
pub struct ScriptedBackend {
    table: HashMap<(TemplateId, String, Option<u32>), String>,
    concurrency: usize,
}

impl ScriptedBackend {
    pub fn new(fixture: ScriptedFixture) -> Self {
        let table = fixture
            .entries
            .into_iter()
            .map(|e| ((e.template, e.digest, e.sample), e.response))
            .collect();
        ScriptedBackend { table, concurrency: 4 }
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.concurrency = n.max(1);
        self
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let digest = request.digest();
        let key = (request.template, digest, Some(request.sample));
        if let Some(r) = self.table.get(&key) {
            return Ok(r.clone());
        }
        let (template, digest, _) = key;
        let key = (template, digest, None);
        self.table.get(&key).cloned().ok_or_else(|| BackendError::FixtureMiss {
            template,
            digest: key.1.clone(),
            sample: request.sample,
        })
    }

    fn max_concurrency(&self) -> usize {
        self.concurrency
    }
}

type Responder = dyn Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync;

/// Backend driven by a closure. Every exchange is recorded so that a run can
/// be frozen into a [`ScriptedFixture`].
pub struct FnBackend {
    responder: Box<Responder>,
    log: Mutex<Vec<FixtureEntry>>,
    concurrency: usize,
}

impl FnBackend {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        FnBackend {
            responder: Box::new(f),
            log: Mutex::new(Vec::new()),
            concurrency: 4,
        }
    }

    /// Always answers with `text`, whatever the request.
    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        FnBackend::new(move |_| Ok(text.clone()))
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.concurrency = n.max(1);
        self
    }

    /// Recorded exchanges as a fixture, sorted and deduplicated.
    ///
    /// Entries are pinned to their draw index only when `pin_samples` is set.
    pub fn recorded(&self, pin_samples: bool) -> ScriptedFixture {
        let mut entries = self.log.lock().unwrap().clone();
        if !pin_samples {
            for e in &mut entries {
                e.sample = None;
            }
        }
        entries.sort_by(|a, b| {
            (a.template.as_str(), &a.digest, a.sample).cmp(&(b.template.as_str(), &b.digest, b.sample))
        });
        entries.dedup();
        ScriptedFixture { entries }
    }

    pub fn calls(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}

impl ChatBackend for FnBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let response = (self.responder)(request)?;
        self.log.lock().unwrap().push(FixtureEntry {
            template: request.template,
            digest: request.digest(),
            sample: Some(request.sample),
            response: response.clone(),
        });
        Ok(response)
    }

    fn max_concurrency(&self) -> usize {
        self.concurrency
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatMessage, CompletionParams, TaskHint};

    fn request(template: TemplateId, content: &str, sample: u32) -> CompletionRequest {
        CompletionRequest {
            template,
            messages: vec![ChatMessage::user(content)],
            params: CompletionParams {
                model: "m".into(),
                temperature: 0.7,
                max_tokens: None,
            },
            sample,
            hint: TaskHint::None,
        }
    }

    #[test]
    fn returns_fixture_text() {
        let req = request(TemplateId::QueryEstimation, "Search Query: Q", 0);
        let mut fx = ScriptedFixture::default();
        fx.push(
            TemplateId::QueryEstimation,
            req.digest(),
            "<answer>0.25</answer><score>0.9</score>",
        );
        let backend = ScriptedBackend::new(fx);
        assert_eq!(
            backend.complete(&req).unwrap(),
            "<answer>0.25</answer><score>0.9</score>"
        );
    }

    #[test]
    fn miss_fails_fast() {
        let backend = ScriptedBackend::new(ScriptedFixture::default());
        let err = backend
            .complete(&request(TemplateId::QueryEstimation, "x", 0))
            .unwrap_err();
        assert!(matches!(err, BackendError::FixtureMiss { .. }));
        assert!(!err.is_retryable());
    }

    #[test]
    fn template_is_part_of_the_key() {
        let req = request(TemplateId::QueryEstimation, "x", 0);
        let mut fx = ScriptedFixture::default();
        fx.push(TemplateId::SimplifyQuery, req.digest(), "nope");
        assert!(ScriptedBackend::new(fx).complete(&req).is_err());
    }

    #[test]
    fn pinned_samples_override_unpinned() {
        let r0 = request(TemplateId::QueryEstimation, "x", 0);
        let r1 = request(TemplateId::QueryEstimation, "x", 1);
        let fx = ScriptedFixture {
            entries: vec![
                FixtureEntry {
                    template: r0.template,
                    digest: r0.digest(),
                    sample: None,
                    response: "any".into(),
                },
                FixtureEntry {
                    template: r0.template,
                    digest: r0.digest(),
                    sample: Some(1),
                    response: "one".into(),
                },
            ],
        };
        let b = ScriptedBackend::new(fx);
        assert_eq!(b.complete(&r0).unwrap(), "any");
        assert_eq!(b.complete(&r1).unwrap(), "one");
    }

    #[test]
    fn concurrent_identical_calls_agree() {
        let req = request(TemplateId::QueryEstimation, "same", 0);
        let mut fx = ScriptedFixture::default();
        fx.push(TemplateId::QueryEstimation, req.digest(), "<answer>7</answer>");
        let backend = ScriptedBackend::new(fx);
        let outs: Vec<String> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..8).map(|_| s.spawn(|| backend.complete(&req).unwrap())).collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(outs.iter().all(|o| o == "<answer>7</answer>"));
    }

    #[test]
    fn recording_round_trips_through_scripted() {
        let fb = FnBackend::new(|r| Ok(format!("echo:{}", r.last_user_content())));
        let reqs: Vec<_> = (0..3)
            .map(|i| request(TemplateId::SimplifyQuery, &format!("q{i}"), 0))
            .collect();
        let live: Vec<_> = reqs.iter().map(|r| fb.complete(r).unwrap()).collect();
        let fx = fb.recorded(false);
        let json = fx.to_json_pretty();
        let back: ScriptedFixture = serde_json::from_str(&json).unwrap();
        let sb = ScriptedBackend::new(back);
        for (r, want) in reqs.iter().zip(live) {
            assert_eq!(sb.complete(r).unwrap(), want);
        }
    }
}
