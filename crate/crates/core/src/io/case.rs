//! Bench cases: an image, its masks and the prompt annotations, stored as
//! JSON next to the referenced files.
//!
//! The whole-image target prompt (`tip`) lists comma-separated labels. The
//! source prompt is `tip` with each target mask label swapped back for its
//! source label; target prompt `i` swaps only label `i`. A case with an
//! empty `tip` uses the source mask labels alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::denoiser::{PromptSpec, ToyWorld};
use crate::error::{Error, Result};
use crate::io::formats::{load_image_any, load_mask_any, read_file, write_file};
use crate::numerics::LatentGrid;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchCase {
    pub id: String,
    pub image: PathBuf,
    pub masks: Vec<PathBuf>,
    pub tip: String,
    pub smp: Vec<String>,
    pub tmp: Vec<String>,
    pub ein: String,
    pub bindings: BTreeMap<String, usize>,
}

/// A case with its files loaded and its prompts resolved against a world.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedCase {
    pub case: BenchCase,
    pub image: LatentGrid,
    pub masks: Vec<LatentGrid>,
    pub source: PromptSpec,
    pub targets: Vec<PromptSpec>,
}

const FIELDS: [&str; 8] = ["id", "image", "masks", "tip", "smp", "tmp", "ein", "bindings"];

fn schema(path: &Path, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.display().to_string(),
        field: field.to_string(),
        message: message.into(),
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn get_str(obj: &Map<String, Value>, field: &str, path: &Path) -> Result<String> {
    match obj.get(field) {
        None => Err(schema(path, field, "missing field")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(schema(path, field, "expected a string")),
    }
}

fn get_str_list(obj: &Map<String, Value>, field: &str, path: &Path) -> Result<Vec<String>> {
    match obj.get(field) {
        None => Err(schema(path, field, "missing field")),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| schema(path, &format!("{field}[{i}]"), "expected a string"))
            })
            .collect(),
        Some(_) => Err(schema(path, field, "expected a list of strings")),
    }
}

impl BenchCase {
    /// Parses and validates case JSON. Referenced files are checked relative
    /// to `base`; `path` names the source in diagnostics.
    pub fn from_json(text: &str, path: &Path, base: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        let obj = value
            .as_object()
            .ok_or_else(|| schema(path, "<root>", "expected a JSON object"))?;
        if let Some(extra) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
            return Err(schema(path, extra, "unknown field"));
        }
        let id = get_str(obj, "id", path)?;
        if id.is_empty() {
            return Err(schema(path, "id", "must not be empty"));
        }
        let image = PathBuf::from(get_str(obj, "image", path)?);
        let masks: Vec<PathBuf> = get_str_list(obj, "masks", path)?.into_iter().map(PathBuf::from).collect();
        let tip = get_str(obj, "tip", path)?;
        let smp = get_str_list(obj, "smp", path)?;
        let tmp = get_str_list(obj, "tmp", path)?;
        let ein = get_str(obj, "ein", path)?;
        let bindings = match obj.get("bindings") {
            None => return Err(schema(path, "bindings", "missing field")),
            Some(Value::Object(m)) => m
                .iter()
                .map(|(k, v)| {
                    v.as_u64()
                        .and_then(|id| usize::try_from(id).ok())
                        .map(|id| (k.clone(), id))
                        .ok_or_else(|| {
                            schema(path, &format!("bindings.{k}"), "expected a non-negative integer token id")
                        })
                })
                .collect::<Result<BTreeMap<_, _>>>()?,
            Some(_) => return Err(schema(path, "bindings", "expected an object")),
        };
        if smp.len() != masks.len() {
            return Err(schema(
                path,
                "smp",
                format!("SMP count {} does not match {} masks", smp.len(), masks.len()),
            ));
        }
        if tmp.len() != masks.len() {
            return Err(schema(
                path,
                "tmp",
                format!("TMP count {} does not match {} masks", tmp.len(), masks.len()),
            ));
        }
        if !base.join(&image).is_file() {
            return Err(schema(path, "image", format!("file {} does not exist", image.display())));
        }
        for (i, m) in masks.iter().enumerate() {
            if !base.join(m).is_file() {
                return Err(schema(path, &format!("masks[{i}]"), format!("file {} does not exist", m.display())));
            }
        }
        Ok(Self {
            id,
            image,
            masks,
            tip,
            smp,
            tmp,
            ein,
            bindings,
        })
    }

    /// Pretty JSON with a trailing newline. Field and binding order are fixed,
    /// so equal cases serialize to equal bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("case serializes");
        s.push('\n');
        s
    }

    fn binding(&self, label: &str, field: &str, path: &Path) -> Result<usize> {
        self.bindings
            .get(label)
            .copied()
            .ok_or_else(|| schema(path, field, format!("label {label:?} has no token binding")))
    }

    /// Source and per-mask target prompts as token ids.
    pub fn resolve_prompts(&self, world: &ToyWorld, path: &Path) -> Result<(PromptSpec, Vec<PromptSpec>)> {
        let labels: Vec<String> = if self.tip.trim().is_empty() {
            self.tmp.clone()
        } else {
            self.tip.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
        };
        let mut positions = Vec::with_capacity(self.tmp.len());
        for t in &self.tmp {
            let pos = labels
                .iter()
                .enumerate()
                .position(|(j, l)| l == t && !positions.contains(&j))
                .ok_or_else(|| schema(path, "tip", format!("target mask prompt {t:?} does not appear in TIP")))?;
            positions.push(pos);
        }
        let mut source: Vec<usize> = labels
            .iter()
            .map(|l| self.binding(l, "bindings", path))
            .collect::<Result<_>>()?;
        for (i, &pos) in positions.iter().enumerate() {
            source[pos] = self.binding(&self.smp[i], "bindings", path)?;
        }
        let check = |tokens: &[usize], label: &str| -> Result<PromptSpec> {
            world
                .prompt(tokens, label)
                .map_err(|e| schema(path, "bindings", e.to_string()))
        };
        let source_prompt = check(&source, "")?;
        let targets = positions
            .iter()
            .enumerate()
            .map(|(i, &pos)| {
                let mut t = source.clone();
                t[pos] = self.binding(&self.tmp[i], "bindings", path)?;
                check(&t, &self.tmp[i])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((source_prompt, targets))
    }
}

pub fn load_case(path: &Path) -> Result<BenchCase> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: e.valid_up_to(),
        message: "case file is not UTF-8".into(),
    })?;
    BenchCase::from_json(text, path, path.parent().unwrap_or(Path::new(".")))
}

pub fn save_case(case: &BenchCase, path: &Path) -> Result<()> {
    write_file(path, case.to_json().as_bytes())
}

/// Loads a case, its image and masks, and resolves its prompts.
pub fn load_case_full(path: &Path, world: &ToyWorld) -> Result<LoadedCase> {
    let case = load_case(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let image = load_image_any(&base.join(&case.image))?;
    if image.shape() != world.shape() {
        return Err(schema(
            path,
            "image",
            format!("image shape {:?} does not match world shape {:?}", image.shape(), world.shape()),
        ));
    }
    let masks = case
        .masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let g = load_mask_any(&base.join(m))?;
            if (g.height(), g.width()) != (image.height(), image.width()) {
                return Err(schema(path, &format!("masks[{i}]"), "mask size does not match the image"));
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let (source, targets) = case.resolve_prompts(world, path)?;
    Ok(LoadedCase {
        case,
        image,
        masks,
        source,
        targets,
    })
}

/// Case files of a bench directory, sorted by name.
pub fn list_cases(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::invalid(format!("no case files in {}", dir.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::formats::{save_latent, save_mask_pgm};
    use crate::toy::ToySpec;

    fn minimal(dir: &Path) -> BenchCase {
        save_latent(&dir.join("img.lat"), &LatentGrid::zeros(32, 32, 3)).unwrap();
        save_mask_pgm(&dir.join("m0.pgm"), &LatentGrid::filled(32, 32, 1, 1.0)).unwrap();
        BenchCase {
            id: "min".into(),
            image: "img.lat".into(),
            masks: vec!["m0.pgm".into()],
            tip: String::new(),
            smp: vec!["red disk@A".into()],
            tmp: vec!["blue disk@A".into()],
            ein: String::new(),
            bindings: [("red disk@A".to_string(), 2), ("blue disk@A".to_string(), 4)].into(),
        }
    }

    #[test]
    fn minimal_case_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let case = minimal(dir.path());
        let p = dir.path().join("min.json");
        save_case(&case, &p).unwrap();
        let back = load_case(&p).unwrap();
        assert_eq!(back, case);
        assert_eq!(back.to_json(), case.to_json());
        let world = ToySpec::bench().build().unwrap();
        let loaded = load_case_full(&p, &world).unwrap();
        assert_eq!(loaded.source.tokens, vec![2, 0, 0, 0]);
        assert_eq!(loaded.targets[0].tokens, vec![4, 0, 0, 0]);
    }

    #[test]
    fn tip_substitution() {
        let dir = tempfile::tempdir().unwrap();
        let mut case = minimal(dir.path());
        case.tip = "scene, green square@B, blue disk@A".into();
        case.bindings.insert("scene".into(), 1);
        case.bindings.insert("green square@B".into(), 7);
        let world = ToySpec::bench().build().unwrap();
        let (s, t) = case.resolve_prompts(&world, Path::new("c.json")).unwrap();
        assert_eq!(s.tokens, vec![1, 7, 2, 0]);
        assert_eq!(t[0].tokens, vec![1, 7, 4, 0]);
        case.bindings.remove("scene");
        let err = case.resolve_prompts(&world, Path::new("c.json")).unwrap_err();
        assert!(matches!(err, Error::Schema { ref field, .. } if field == "bindings"));
    }

    #[test]
    fn schema_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let case = minimal(dir.path());
        let base = dir.path();
        let field_of = |json: &str| match BenchCase::from_json(json, Path::new("c.json"), base).unwrap_err() {
            Error::Schema { field, message, .. } => (field, message),
            e => panic!("{e}"),
        };
        let mut v: Value = serde_json::from_str(&case.to_json()).unwrap();
        v["masks"] = serde_json::json!(["m0.pgm", "m0.pgm"]);
        v["smp"] = serde_json::json!(["a", "b"]);
        let (f, m) = field_of(&v.to_string());
        assert_eq!(f, "tmp");
        assert!(m.contains("TMP count"));

        let mut v: Value = serde_json::from_str(&case.to_json()).unwrap();
        v.as_object_mut().unwrap().remove("ein");
        assert_eq!(field_of(&v.to_string()).0, "ein");

        let mut v: Value = serde_json::from_str(&case.to_json()).unwrap();
        v["image"] = "missing.lat".into();
        assert_eq!(field_of(&v.to_string()).0, "image");

        let mut v: Value = serde_json::from_str(&case.to_json()).unwrap();
        v["bindings"]["x"] = (-1).into();
        assert_eq!(field_of(&v.to_string()).0, "bindings.x");
    }

    #[test]
    fn syntax_errors_carry_byte_offsets() {
        let text = "{\n  \"id\": \"x\",\n  oops\n}";
        match BenchCase::from_json(text, Path::new("c.json"), Path::new(".")).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(&text[offset..offset + 1], "o"),
            e => panic!("{e}"),
        }
    }
}
