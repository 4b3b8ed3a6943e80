use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use super::Gather;
use crate::error::Result;

type Key = (&'static str, Vec<usize>);

static TABLES: OnceLock<Mutex<HashMap<Key, Arc<Gather>>>> = OnceLock::new();

/// Process-wide memo of index tables keyed by a kind tag and integer
/// parameters (dims, shifts, ...). Tables depend only on shapes, so one copy
/// serves every thread and every forward pass.
pub fn cached_gather(
    kind: &'static str,
    key: &[usize],
    build: impl FnOnce() -> Result<Gather>,
) -> Result<Arc<Gather>> {
    let map = TABLES.get_or_init(Default::default);
    let k = (kind, key.to_vec());
    if let Some(g) = map.lock().expect("gather cache poisoned").get(&k) {
        return Ok(Arc::clone(g));
    }
    let g = Arc::new(build()?);
    map.lock()
        .expect("gather cache poisoned")
        .entry(k)
        .or_insert_with(|| Arc::clone(&g));
    Ok(g)
}
