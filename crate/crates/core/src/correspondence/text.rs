//! Line-oriented text form of masks and correspondence maps.
//!
//! ```text
//! # grid=16x16
//! image=0 mask=3,4,19
//! image=1 map=5:0/3,6:0/19
//! ```
//!
//! Lines starting with `#` are comments, except the `grid=` header which
//! masks files must carry.

use std::fmt::Write as _;
use std::path::Path;

use super::{CorrespondenceMap, PatchMatch, SubjectMask};
use crate::error::{Error, Result};

pub fn format_masks(masks: &[SubjectMask]) -> String {
    let mut out = String::new();
    if let Some(first) = masks.first() {
        let (h, w) = first.grid();
        writeln!(out, "# grid={h}x{w}").unwrap();
    }
    for m in masks {
        let idx: Vec<String> = m.indices().iter().map(usize::to_string).collect();
        writeln!(out, "image={} mask={}", m.image_index(), idx.join(",")).unwrap();
    }
    out
}

pub fn format_maps(maps: &[CorrespondenceMap]) -> String {
    let mut out = String::new();
    for map in maps {
        let items: Vec<String> = map
            .entries
            .iter()
            .map(|e| format!("{}:{}/{}", e.patch, e.anchor, e.anchor_patch))
            .collect();
        writeln!(out, "image={} map={}", map.image_index, items.join(",")).unwrap();
    }
    out
}

fn parse_error(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Splits `image=<i> <key>=<payload>`.
fn split_record<'a>(raw: &'a str, key: &str, path: &Path, line: usize) -> Result<(usize, &'a str)> {
    let mut parts = raw.split_whitespace();
    let (Some(image), Some(body), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(parse_error(path, line, "expected `image=<i> <field>=<values>`"));
    };
    let image = image
        .strip_prefix("image=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_error(path, line, format!("bad image field `{image}`")))?;
    let payload = body
        .strip_prefix(key)
        .and_then(|b| b.strip_prefix('='))
        .ok_or_else(|| parse_error(path, line, format!("expected `{key}=`")))?;
    Ok((image, payload))
}

fn parse_usize(s: &str, path: &Path, line: usize) -> Result<usize> {
    s.parse()
        .map_err(|_| parse_error(path, line, format!("`{s}` is not a non-negative integer")))
}

fn parse_grid(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once('x')?;
    Some((h.parse().ok()?, w.parse().ok()?))
}

/// Parses a masks file; `path` only labels errors.
pub fn parse_masks(text: &str, path: &Path) -> Result<Vec<SubjectMask>> {
    let mut grid = None;
    let mut masks = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        if let Some(comment) = raw.strip_prefix('#') {
            if let Some(g) = comment.trim().strip_prefix("grid=") {
                grid = Some(parse_grid(g).ok_or_else(|| parse_error(path, line, format!("bad grid `{g}`")))?);
            }
            continue;
        }
        let grid = grid.ok_or_else(|| parse_error(path, line, "mask record before `# grid=` header"))?;
        let (image, payload) = split_record(raw, "mask", path, line)?;
        let indices = if payload.is_empty() {
            Vec::new()
        } else {
            payload
                .split(',')
                .map(|s| parse_usize(s, path, line))
                .collect::<Result<_>>()?
        };
        let mask = SubjectMask::new(image, indices, grid).map_err(|e| parse_error(path, line, e.to_string()))?;
        masks.push(mask);
    }
    Ok(masks)
}

pub fn parse_maps(text: &str, path: &Path) -> Result<Vec<CorrespondenceMap>> {
    let mut maps = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let (image, payload) = split_record(raw, "map", path, line)?;
        let mut entries = Vec::new();
        if !payload.is_empty() {
            for item in payload.split(',') {
                let bad = || parse_error(path, line, format!("bad map entry `{item}`"));
                let (patch, target) = item.split_once(':').ok_or_else(bad)?;
                let (anchor, anchor_patch) = target.split_once('/').ok_or_else(bad)?;
                entries.push(PatchMatch {
                    patch: parse_usize(patch, path, line)?,
                    anchor: parse_usize(anchor, path, line)?,
                    anchor_patch: parse_usize(anchor_patch, path, line)?,
                    similarity: None,
                });
            }
        }
        let map = CorrespondenceMap::new(image, entries).map_err(|e| parse_error(path, line, e.to_string()))?;
        maps.push(map);
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_text() {
        let masks = vec![
            SubjectMask::new(0, vec![3, 4, 19], (16, 16)).unwrap(),
            SubjectMask::new(1, vec![], (16, 16)).unwrap(),
        ];
        let text = format_masks(&masks);
        assert_eq!(text, "# grid=16x16\nimage=0 mask=3,4,19\nimage=1 mask=\n");
        assert_eq!(parse_masks(&text, Path::new("m")).unwrap(), masks);

        let map = CorrespondenceMap::new(
            1,
            vec![
                PatchMatch {
                    patch: 5,
                    anchor: 0,
                    anchor_patch: 3,
                    similarity: Some(0.5),
                },
                PatchMatch {
                    patch: 6,
                    anchor: 2,
                    anchor_patch: 19,
                    similarity: None,
                },
            ],
        )
        .unwrap();
        let text = format_maps(&[map]);
        assert_eq!(text, "image=1 map=5:0/3,6:2/19\n");
        let back = parse_maps(&text, Path::new("p")).unwrap();
        assert_eq!((back[0].entries[1].anchor, back[0].entries[1].anchor_patch), (2, 19));
        assert_eq!(back[0].entries[0].similarity, None);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let p = Path::new("masks.txt");
        match parse_masks("# grid=4x4\nimage=0 mask=1,2\nimage=1 mask=2,x\n", p) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_masks("image=0 mask=1\n", p),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_masks("# grid=2x2\nimage=0 mask=9\n", p),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(parse_maps("image=1 map=5-0/3\n", p).is_err());
        assert!(parse_maps("image=1 mask=5\n", p).is_err());
    }
}
