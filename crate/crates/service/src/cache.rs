use std::collections::{HashMap, VecDeque};
use std::future::Future;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use tokio::sync::OnceCell;

/// Serialized explanation payloads, bounded by entry count (oldest evicted first).
///
/// Concurrent requests for one key share a single computation. Failed
/// computations are not stored, so the next request retries.
pub struct ExplanationCache {
    capacity: usize,
    inner: Mutex<Inner>,
}

#[derive(Default)]
struct Inner {
    cells: HashMap<String, Arc<OnceCell<Bytes>>>,
    order: VecDeque<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Miss,
}

impl CacheStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CacheStatus::Hit => "hit",
            CacheStatus::Miss => "miss",
        }
    }
}

impl ExplanationCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            inner: Mutex::new(Inner::default()),
        }
    }

    fn cell(&self, key: &str) -> Arc<OnceCell<Bytes>> {
        let mut inner = self.inner.lock().expect("cache lock poisoned");
        if let Some(cell) = inner.cells.get(key) {
            return cell.clone();
        }
        let cell = Arc::new(OnceCell::new());
        if self.capacity > 0 {
            while inner.order.len() >= self.capacity {
                let Some(old) = inner.order.pop_front() else {
                    break;
                };
                inner.cells.remove(&old);
            }
            inner.cells.insert(key.to_string(), cell.clone());
            inner.order.push_back(key.to_string());
        }
        cell
    }

    pub async fn get_or_compute<E, F, Fut>(
        &self,
        key: &str,
        compute: F,
    ) -> Result<(Bytes, CacheStatus), E>
    where
        F: FnOnce() -> Fut,
        Fut: Future<Output = Result<Bytes, E>>,
    {
        let cell = self.cell(key);
        if let Some(b) = cell.get() {
            return Ok((b.clone(), CacheStatus::Hit));
        }
        let mut computed = false;
        let bytes = cell
            .get_or_try_init(|| {
                computed = true;
                compute()
            })
            .await?;
        let status = if computed {
            CacheStatus::Miss
        } else {
            CacheStatus::Hit
        };
        Ok((bytes.clone(), status))
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock poisoned").cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
