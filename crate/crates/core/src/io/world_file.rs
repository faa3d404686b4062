//! Line-oriented world description.
//!
//! ```text
//! # comment
//! prompt_length 4
//! token 1 scene
//! component 1 0.7 0.1 mean scene_warm.lat
//! ```
//!
//! Token ids must be dense. Token 0 is the null token; when the file does
//! not declare it, the default broad prior is used. Mean files are latent
//! containers relative to the world file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::denoiser::{Component, Token, ToyWorld, DEFAULT_PROMPT_LEN, NULL_TOKEN};
use crate::error::{Error, Result};
use crate::io::formats::{load_latent, read_file, save_latent, write_file};

fn at(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(s: Option<&str>, what: &str, path: &Path, offset: usize) -> Result<T> {
    s.and_then(|v| v.parse().ok())
        .ok_or_else(|| at(path, offset, format!("expected {what}, got {:?}", s.unwrap_or(""))))
}

pub fn load_world(path: &Path) -> Result<ToyWorld> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| at(path, e.valid_up_to(), "world file is not UTF-8"))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut prompt_len = DEFAULT_PROMPT_LEN;
    let mut labels: BTreeMap<usize, (String, usize)> = BTreeMap::new();
    let mut comps: BTreeMap<usize, Vec<(Component, usize)>> = BTreeMap::new();
    let mut shape = None;
    let mut offset = 0;
    for (lineno, raw) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += raw.len();
        let line = raw.trim_end_matches(['\n', '\r']);
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let ctx = |m: String| at(path, start, format!("line {}: {m}", lineno + 1));
        let mut parts = content.split_whitespace();
        match parts.next() {
            Some("prompt_length") => {
                prompt_len = num(parts.next(), "a prompt length", path, start)?;
                if parts.next().is_some() {
                    return Err(ctx("extra fields after prompt_length".into()));
                }
            }
            Some("token") => {
                let id: usize = num(parts.next(), "a token id", path, start)?;
                let label = parts.collect::<Vec<_>>().join(" ");
                if label.is_empty() {
                    return Err(ctx(format!("token {id} has no label")));
                }
                if labels.insert(id, (label, start)).is_some() {
                    return Err(ctx(format!("token {id} declared twice")));
                }
            }
            Some("component") => {
                let id: usize = num(parts.next(), "a token id", path, start)?;
                let weight: f64 = num(parts.next(), "a weight", path, start)?;
                let std: f64 = num(parts.next(), "a std", path, start)?;
                if parts.next() != Some("mean") {
                    return Err(ctx("expected `mean <file>`".into()));
                }
                let file = parts.next().ok_or_else(|| ctx("missing mean file".into()))?;
                if parts.next().is_some() {
                    return Err(ctx("extra fields after the mean file".into()));
                }
                if !(weight > 0.0 && weight.is_finite()) || !(std > 0.0 && std.is_finite()) {
                    return Err(ctx("weight and std must be positive".into()));
                }
                let mean = load_latent(&base.join(file))?;
                match shape {
                    None => shape = Some(mean.shape()),
                    Some(s) if s != mean.shape() => {
                        return Err(ctx(format!("mean shape {:?} differs from {s:?}", mean.shape())));
                    }
                    _ => {}
                }
                comps.entry(id).or_default().push((Component { weight, std, mean }, start));
            }
            Some(other) => return Err(ctx(format!("unknown directive {other:?}"))),
            None => unreachable!("non-empty line"),
        }
    }
    let shape = shape.ok_or_else(|| at(path, text.len(), "world declares no components"))?;
    if let Some((&id, &(_, off))) = labels.iter().find(|(id, _)| !comps.contains_key(id)) {
        return Err(at(path, off, format!("token {id} has no components")));
    }
    if let Some((&id, v)) = comps.iter().find(|(id, _)| !labels.contains_key(id)) {
        return Err(at(path, v[0].1, format!("component for undeclared token {id}")));
    }
    let first = usize::from(!labels.contains_key(&NULL_TOKEN));
    let mut tokens = if first == 1 { vec![ToyWorld::null_token(shape)] } else { Vec::new() };
    for (expect, (&id, (label, off))) in (first..).zip(&labels) {
        if id != expect {
            return Err(at(path, *off, format!("token ids must be dense, expected {expect} got {id}")));
        }
        let components: Vec<Component> = comps.remove(&id).expect("checked").into_iter().map(|c| c.0).collect();
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(at(path, *off, format!("token {id} weights sum to {total}")));
        }
        tokens.push(Token {
            label: label.clone(),
            components,
        });
    }
    ToyWorld::new(shape, prompt_len, tokens).map_err(|e| at(path, 0, e.to_string()))
}

/// Writes `name` plus one mean file per component into `dir`.
pub fn save_world(world: &ToyWorld, dir: &Path, name: &str) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "prompt_length {}", world.prompt_len());
    for (id, tok) in world.tokens().iter().enumerate() {
        let _ = writeln!(text, "token {id} {}", tok.label);
        for (k, c) in tok.components.iter().enumerate() {
            let file = format!("t{id:03}_c{k}.lat");
            save_latent(&dir.join(&file), &c.mean)?;
            let _ = writeln!(text, "component {id} {:?} {:?} mean {file}", c.weight, c.std);
        }
    }
    write_file(&dir.join(name), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::ToySpec;

    #[test]
    fn bench_world_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let world = ToySpec::bench().build().unwrap();
        save_world(&world, dir.path(), "world.txt").unwrap();
        let back = load_world(&dir.path().join("world.txt")).unwrap();
        assert_eq!(back.prompt_len(), world.prompt_len());
        assert_eq!(back.vocab_size(), world.vocab_size());
        for (a, b) in back.tokens().iter().zip(world.tokens()) {
            assert_eq!(a.label, b.label);
            for (ca, cb) in a.components.iter().zip(&b.components) {
                assert_eq!(ca.weight, cb.weight);
                assert_eq!(ca.std, cb.std);
                assert!(ca.mean.max_abs_diff(&cb.mean).unwrap() < 1e-7);
            }
        }
    }

    #[test]
    fn implicit_null_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        save_latent(&p.join("m.lat"), &crate::LatentGrid::zeros(2, 2, 1)).unwrap();
        let write = |s: &str| {
            std::fs::write(p.join("w.txt"), s).unwrap();
            load_world(&p.join("w.txt"))
        };
        let w = write("# tiny\ntoken 1 blob thing\ncomponent 1 1.0 0.5 mean m.lat\n").unwrap();
        assert_eq!(w.vocab_size(), 2);
        assert_eq!(w.token(1).unwrap().label, "blob thing");
        let off = |s: &str| match write(s).unwrap_err() {
            Error::Format { offset, .. } => offset,
            e => panic!("{e}"),
        };
        assert_eq!(off("token 1 a\ncomponent 1 x 0.5 mean m.lat\n"), 10);
        assert_eq!(off("token 2 a\ncomponent 2 1 0.5 mean m.lat\n"), 0);
        assert_eq!(off("token 1 a\ncomponent 1 0.5 0.5 mean m.lat\n"), 0);
        assert_eq!(off("token 1 a\nbogus\n"), 10);
        assert!(write("token 1 a\ncomponent 1 1 0.5 mean nope.lat\n").is_err());
    }
}
