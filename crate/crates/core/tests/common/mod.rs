#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cstyle_core::RunConfig;

pub fn config(overrides: &[&str]) -> RunConfig {
    let owned: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_text("", &owned).expect("valid test config")
}

/// Every file under `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// First relative path at which two trees differ, if any.
pub fn tree_diff(a: &Path, b: &Path) -> Option<String> {
    let (ta, tb) = (tree(a), tree(b));
    for (path, bytes) in &ta {
        match tb.get(path) {
            Some(other) if other == bytes => {}
            _ => return Some(path.clone()),
        }
    }
    tb.keys().find(|p| !ta.contains_key(*p)).cloned()
}
