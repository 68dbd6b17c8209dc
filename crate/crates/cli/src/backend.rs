//! Backend specs given on the command line and the dispatchers built from them.
//!
//! Spec forms: `mock:RULES.json`, `proxy` or `proxy:URL` (URL defaults to
//! `FALCONER_PROXY_URL`), and `annotator:MODEL` (talks to the OpenAI-compatible
//! endpoint at `FALCONER_PLANNER_URL`).

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use falconer_core::backends::{
    AnnotatorBackend, Backend, BackendDescriptor, BackendKind, DirCache, Dispatcher, HttpTransport, MockBackend,
    MockRules, OpenAiChat, ProxyBackend, RetryPolicy,
};

use crate::exit::{fail, BAD_ARGS};

const PROXY_MAX_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Mock(PathBuf),
    Proxy(Option<String>),
    Annotator(String),
}

impl BackendSpec {
    pub fn parse(raw: &str) -> anyhow::Result<Self> {
        let (kind, arg) = match raw.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (raw, None),
        };
        match (kind, arg) {
            ("mock", Some(path)) if !path.is_empty() => Ok(Self::Mock(PathBuf::from(path))),
            ("proxy", None) => Ok(Self::Proxy(None)),
            ("proxy", Some(url)) if !url.is_empty() => Ok(Self::Proxy(Some(url.to_string()))),
            ("annotator", Some(model)) if !model.is_empty() => Ok(Self::Annotator(model.to_string())),
            _ => Err(fail(
                BAD_ARGS,
                format!("bad backend spec {raw:?}; expected mock:RULES.json, proxy[:URL] or annotator:MODEL"),
            )),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct HttpSettings {
    pub api_key: Option<String>,
    pub planner_url: Option<String>,
    pub proxy_url: Option<String>,
    pub timeout: Duration,
    pub retries: u32,
}

impl HttpSettings {
    pub fn transport(&self) -> HttpTransport {
        HttpTransport::new(self.api_key.clone(), self.timeout).with_retry(RetryPolicy {
            attempts: self.retries.max(1),
            ..RetryPolicy::default()
        })
    }

    pub fn planner_url(&self) -> anyhow::Result<&str> {
        self.planner_url.as_deref().ok_or_else(|| {
            fail(
                BAD_ARGS,
                "no planner endpoint; pass --planner-url or set FALCONER_PLANNER_URL",
            )
        })
    }
}

pub fn load_mock(path: &Path) -> anyhow::Result<MockBackend> {
    let rules = MockRules::load(path).map_err(|e| fail(BAD_ARGS, e))?;
    Ok(MockBackend::new(rules)?)
}

pub fn build(spec: &BackendSpec, http: &HttpSettings) -> anyhow::Result<Arc<dyn Backend>> {
    Ok(match spec {
        BackendSpec::Mock(path) => Arc::new(load_mock(path)?),
        BackendSpec::Proxy(url) => {
            let url = url
                .as_deref()
                .or(http.proxy_url.as_deref())
                .ok_or_else(|| fail(BAD_ARGS, "no proxy URL; use proxy:URL or set FALCONER_PROXY_URL"))?;
            let desc = BackendDescriptor::new("proxy", BackendKind::HttpProxy, PROXY_MAX_BATCH);
            Arc::new(ProxyBackend::new(desc, url, http.transport())?)
        }
        BackendSpec::Annotator(model) => {
            let client = OpenAiChat::new(http.planner_url()?, model.as_str(), http.transport());
            let desc = BackendDescriptor::new(format!("annotator-{model}"), BackendKind::LlmAnnotator, 1);
            Arc::new(AnnotatorBackend::new(desc, client)?)
        }
    })
}

pub fn dispatcher(spec: &BackendSpec, http: &HttpSettings, cache: Option<&Path>) -> anyhow::Result<Arc<Dispatcher>> {
    let mut d = Dispatcher::new(build(spec, http)?)?;
    if let Some(dir) = cache {
        let cache = DirCache::open(dir).map_err(|e| fail(BAD_ARGS, format!("cache dir {}: {e}", dir.display())))?;
        d = d.with_cache(Arc::new(cache));
    }
    Ok(Arc::new(d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_forms() {
        assert_eq!(
            BackendSpec::parse("mock:r.json").unwrap(),
            BackendSpec::Mock("r.json".into())
        );
        assert_eq!(BackendSpec::parse("proxy").unwrap(), BackendSpec::Proxy(None));
        assert_eq!(
            BackendSpec::parse("proxy:http://h:1").unwrap(),
            BackendSpec::Proxy(Some("http://h:1".into()))
        );
        assert_eq!(
            BackendSpec::parse("annotator:gpt").unwrap(),
            BackendSpec::Annotator("gpt".into())
        );
        for bad in ["mock", "mock:", "annotator", "gpu:1", ""] {
            assert!(BackendSpec::parse(bad).is_err(), "{bad}");
        }
    }
}
