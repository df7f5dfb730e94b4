//! Content-addressed response cache.
//!
//! Layout: `<root>/<role>/<first two hex digits>/<digest>.json`. Each entry
//! stores a summary of the request, the raw response body, and how long the
//! original call took. Writes go through a temp file and a rename, so
//! concurrent writers of the same key leave one complete entry.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::Role;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(String);

#[derive(Serialize)]
struct KeyMaterial<'a> {
    role: Role,
    model: &'a str,
    prompt: &'a str,
    media: Option<&'a str>,
    interval: Option<(f64, f64)>,
    decode: &'a Value,
}

impl CacheKey {
    pub fn new(
        role: Role,
        model: &str,
        prompt: &str,
        media: Option<&str>,
        interval: Option<(f64, f64)>,
        decode: &Value,
    ) -> Self {
        let material = KeyMaterial { role, model, prompt, media, interval, decode };
        let bytes = serde_json::to_vec(&material).expect("key material serializes");
        CacheKey(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn digest(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request: Value,
    pub response: String,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, role: Role, key: &CacheKey) -> PathBuf {
        let d = key.digest();
        self.root.join(role.as_str()).join(&d[..2]).join(format!("{d}.json"))
    }

    /// Raw response body stored under `key`, if any. Unreadable entries are
    /// treated as misses.
    pub fn get(&self, role: Role, key: &CacheKey) -> Option<String> {
        let path = self.path_for(role, key);
        let bytes = std::fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.key == key.digest() => Some(entry.response),
            _ => {
                log::warn!("ignoring corrupt cache entry {}", path.display());
                None
            }
        }
    }

    pub fn put(&self, role: Role, key: &CacheKey, request: Value, response: &str, elapsed_ms: u64) -> std::io::Result<()> {
        let entry = CacheEntry { key: key.digest().to_string(), request, response: response.to_string(), elapsed_ms };
        let bytes = serde_json::to_vec_pretty(&entry).map_err(std::io::Error::other)?;
        crate::fsutil::write_atomic(&self.path_for(role, key), &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_stable_and_sensitive() {
        let d = json!({"temperature": 1.0});
        let a = CacheKey::new(Role::Llm, "m", "p", None, None, &d);
        assert_eq!(a, CacheKey::new(Role::Llm, "m", "p", None, None, &d));
        assert_eq!(a.digest().len(), 64);
        let variants = [
            CacheKey::new(Role::Judge, "m", "p", None, None, &d),
            CacheKey::new(Role::Llm, "m2", "p", None, None, &d),
            CacheKey::new(Role::Llm, "m", "p2", None, None, &d),
            CacheKey::new(Role::Llm, "m", "p", Some("x"), None, &d),
            CacheKey::new(Role::Llm, "m", "p", None, Some((0.0, 1.0)), &d),
            CacheKey::new(Role::Llm, "m", "p", None, None, &json!({"temperature": 0.5})),
        ];
        for v in &variants {
            assert_ne!(&a, v);
        }
    }

    #[test]
    fn put_then_get_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let key = CacheKey::new(Role::Captioner, "m", "p", Some("v.mp4"), Some((0.0, 8.0)), &json!({}));
        assert_eq!(cache.get(Role::Captioner, &key), None);
        let body = "{\"caption\": \"naïve \\u00e9\"}\n";
        cache.put(Role::Captioner, &key, json!({"prompt": "p"}), body, 12).unwrap();
        assert_eq!(cache.get(Role::Captioner, &key).as_deref(), Some(body));
        let path = cache.path_for(Role::Captioner, &key);
        assert!(path.starts_with(dir.path().join("captioner").join(&key.digest()[..2])));
        std::fs::write(&path, "garbage").unwrap();
        assert_eq!(cache.get(Role::Captioner, &key), None);
    }
}
