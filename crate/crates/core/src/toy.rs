//! Deterministic toy worlds and edit cases.
//!
//! A world is a two-mode "scene" backdrop plus coloured objects that can sit
//! in a fixed set of slots. Object tokens add their colour offset inside the
//! slot shape, so a prompt like `scene, red disk@A` describes the backdrop
//! with a red disk in slot A.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::denoiser::{Component, PromptSpec, Token, ToyWorld};
use crate::error::{Error, Result};
use crate::io::case::{save_case, BenchCase};
use crate::io::formats::{save_latent, save_mask_pgm};
use crate::io::world_file::save_world;
use crate::numerics::{LatentGrid, SeededRng};
use crate::pipeline::{EditJob, JobConfig};

pub const SCENE_STD: f64 = 0.1;
pub const OBJECT_STD: f64 = 0.15;
const SCENE_WEIGHTS: [f64; 2] = [0.7, 0.3];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
}

impl Shape {
    fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub cy: usize,
    pub cx: usize,
    pub radius: usize,
    pub shape: Shape,
}

impl Slot {
    fn covers(&self, y: usize, x: usize, grow: usize) -> bool {
        let dy = y.abs_diff(self.cy);
        let dx = x.abs_diff(self.cx);
        let r = self.radius + grow;
        match self.shape {
            Shape::Square => dy <= r && dx <= r,
            Shape::Disk => dy * dy + dx * dx <= r * r,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub prompt_len: usize,
    pub slots: Vec<Slot>,
    /// Colour name and per-channel offset.
    pub colors: Vec<(String, Vec<f64>)>,
}

fn basis_colors(channels: usize) -> Vec<(String, Vec<f64>)> {
    let names = ["red", "green", "blue", "yellow"];
    names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let v = (0..channels)
                .map(|c| match i {
                    3 => {
                        if c < 2 {
                            0.5
                        } else {
                            -0.5
                        }
                    }
                    _ => {
                        if c == i % channels {
                            0.6
                        } else {
                            -0.4
                        }
                    }
                })
                .collect();
            (n.to_string(), v)
        })
        .collect()
}

impl ToySpec {
    /// The 32×32×3 world used by the shipped bench.
    pub fn bench() -> Self {
        let slot = |name: &str, cy, cx, shape| Slot {
            name: name.into(),
            cy,
            cx,
            radius: 5,
            shape,
        };
        Self {
            height: 32,
            width: 32,
            channels: 3,
            prompt_len: 4,
            slots: vec![
                slot("A", 8, 8, Shape::Disk),
                slot("B", 8, 23, Shape::Square),
                slot("C", 23, 8, Shape::Square),
                slot("D", 23, 23, Shape::Disk),
            ],
            colors: basis_colors(3),
        }
    }

    /// A larger synthetic world with seven slots for timing runs.
    pub fn timing() -> Self {
        let centers = [(10, 10), (10, 32), (10, 53), (32, 20), (32, 43), (53, 10), (53, 42)];
        Self {
            height: 64,
            width: 64,
            channels: 4,
            prompt_len: 8,
            slots: centers
                .iter()
                .enumerate()
                .map(|(i, &(cy, cx))| Slot {
                    name: ((b'A' + i as u8) as char).to_string(),
                    cy,
                    cx,
                    radius: 7,
                    shape: if i % 2 == 0 { Shape::Disk } else { Shape::Square },
                })
                .collect(),
            colors: basis_colors(4),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn object_label(&self, color: usize, slot: usize) -> String {
        let s = &self.slots[slot];
        format!("{} {}@{}", self.colors[color].0, s.shape.name(), s.name)
    }

    /// Token id of colour `color` in slot `slot`; the scene is token 1.
    pub fn object_token(&self, color: usize, slot: usize) -> usize {
        2 + slot * self.colors.len() + color
    }

    /// Binary mask of a slot, grown by one pixel.
    pub fn slot_mask(&self, slot: usize) -> LatentGrid {
        let s = &self.slots[slot];
        LatentGrid::from_fn(self.height, self.width, 1, |y, x, _| if s.covers(y, x, 1) { 1.0 } else { 0.0 })
    }

    fn scene_means(&self) -> [LatentGrid; 2] {
        let (h, w, c) = self.shape();
        let u = |x: usize| 2.0 * x as f64 / (w - 1).max(1) as f64 - 1.0;
        let v = |y: usize| 2.0 * y as f64 / (h - 1).max(1) as f64 - 1.0;
        let warm = LatentGrid::from_fn(h, w, c, |y, x, ch| match ch % 3 {
            0 => 0.2 + 0.1 * u(x),
            1 => 0.1 * v(y),
            _ => -0.15,
        });
        let cool = LatentGrid::from_fn(h, w, c, |y, x, ch| match ch % 3 {
            0 => -0.15,
            1 => 0.1 * v(y),
            _ => 0.2 + 0.1 * u(x),
        });
        [warm, cool]
    }

    pub fn build(&self) -> Result<ToyWorld> {
        let (h, w, c) = self.shape();
        if self.colors.iter().any(|(_, v)| v.len() != c) {
            return Err(Error::invalid("colour offsets must have one entry per channel"));
        }
        let mut tokens = vec![ToyWorld::null_token(self.shape())];
        let [warm, cool] = self.scene_means();
        tokens.push(Token {
            label: "scene".into(),
            components: vec![
                Component {
                    weight: SCENE_WEIGHTS[0],
                    std: SCENE_STD,
                    mean: warm,
                },
                Component {
                    weight: SCENE_WEIGHTS[1],
                    std: SCENE_STD,
                    mean: cool,
                },
            ],
        });
        for (si, slot) in self.slots.iter().enumerate() {
            for (ci, (_, offset)) in self.colors.iter().enumerate() {
                let mean = LatentGrid::from_fn(h, w, c, |y, x, ch| if slot.covers(y, x, 0) { offset[ch] } else { 0.0 });
                debug_assert_eq!(tokens.len(), self.object_token(ci, si));
                tokens.push(Token {
                    label: self.object_label(ci, si),
                    components: vec![Component {
                        weight: 1.0,
                        std: OBJECT_STD,
                        mean,
                    }],
                });
            }
        }
        ToyWorld::new(self.shape(), self.prompt_len, tokens)
    }
}

/// An edit case in memory, before it is written as a bench case.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCase {
    pub id: String,
    pub image: LatentGrid,
    pub masks: Vec<LatentGrid>,
    pub tip: String,
    pub smp: Vec<String>,
    pub tmp: Vec<String>,
    pub ein: String,
    pub bindings: BTreeMap<String, usize>,
    pub source: PromptSpec,
    pub targets: Vec<PromptSpec>,
}

/// Seed and size of the shipped bench suite.
pub const BENCH_SEED: u64 = 7;
pub const BENCH_CASES: usize = 8;
pub const WORLD_FILE: &str = "world/world.txt";
pub const GOLDEN_FILE: &str = "golden/metrics.json";

impl ToyCase {
    /// The on-disk record; files are named after the case id.
    pub fn bench_case(&self) -> BenchCase {
        BenchCase {
            id: self.id.clone(),
            image: format!("{}.lat", self.id).into(),
            masks: (0..self.masks.len()).map(|i| format!("{}_m{i}.pgm", self.id).into()).collect(),
            tip: self.tip.clone(),
            smp: self.smp.clone(),
            tmp: self.tmp.clone(),
            ein: self.ein.clone(),
            bindings: self.bindings.clone(),
        }
    }

    pub fn job(&self, config: &JobConfig) -> EditJob {
        EditJob {
            id: self.id.clone(),
            x0: self.image.clone(),
            source: self.source.clone(),
            masks: self.masks.clone(),
            targets: self.targets.clone(),
            config: config.clone(),
        }
    }
}

/// Writes the world under `dir/world/` and one JSON file plus image and masks
/// per case. Returns the case file paths.
pub fn write_suite(world: &ToyWorld, cases: &[ToyCase], dir: &Path) -> Result<Vec<PathBuf>> {
    let world_dir = dir.join("world");
    std::fs::create_dir_all(&world_dir).map_err(|e| Error::io(&world_dir, e))?;
    save_world(world, &world_dir, "world.txt")?;
    cases
        .iter()
        .map(|c| {
            let rec = c.bench_case();
            save_latent(&dir.join(&rec.image), &c.image)?;
            for (m, path) in c.masks.iter().zip(&rec.masks) {
                save_mask_pgm(&dir.join(path), m)?;
            }
            let path = dir.join(format!("{}.json", c.id));
            save_case(&rec, &path)?;
            Ok(path)
        })
        .collect()
}

/// Draws a clean image from a prompt's mixture.
pub fn sample_clean(world: &ToyWorld, prompt: &PromptSpec, rng: &mut SeededRng) -> Result<LatentGrid> {
    let mix = world.mixture(prompt)?;
    let u = rng.uniform(0.0, 1.0);
    let mut acc = 0.0;
    let mut pick = mix.components.len() - 1;
    for (i, k) in mix.components.iter().enumerate() {
        acc += k.log_weight.exp();
        if u < acc {
            pick = i;
            break;
        }
    }
    let k = &mix.components[pick];
    let (h, w, c) = world.shape();
    let noise = LatentGrid::standard_normal(h, w, c, rng);
    k.mean.add(&noise.scale(k.var.sqrt()))
}

/// Prompt tokens for the scene followed by objects.
fn prompt_of(spec: &ToySpec, world: &ToyWorld, objects: &[(usize, usize)], label: String) -> Result<PromptSpec> {
    let mut tokens = vec![1];
    tokens.extend(objects.iter().map(|&(col, slot)| spec.object_token(col, slot)));
    world.prompt(&tokens, label)
}

/// `n` seeded cases: case `k` edits `k % max_masks + 1` objects, and cases
/// with spare slots and prompt room keep one untouched context object.
pub fn toy_suite(spec: &ToySpec, world: &ToyWorld, n: usize, seed: u64) -> Result<Vec<ToyCase>> {
    let max_masks = (spec.prompt_len - 1).min(spec.slots.len()).min(3);
    if max_masks == 0 {
        return Err(Error::invalid("toy spec has no room for edit objects"));
    }
    let ncol = spec.colors.len();
    (0..n)
        .map(|k| {
            let mut rng = SeededRng::new(seed, 0x70 + k as u64);
            let n_masks = k % max_masks + 1;
            let mut slots: Vec<usize> = (0..spec.slots.len()).collect();
            for i in (1..slots.len()).rev() {
                slots.swap(i, rng.below(i + 1));
            }
            let edited: Vec<(usize, usize)> = slots[..n_masks].iter().map(|&s| (rng.below(ncol), s)).collect();
            let retarget: Vec<usize> = edited.iter().map(|&(c, _)| (c + 1 + rng.below(ncol - 1)) % ncol).collect();
            let context: Vec<(usize, usize)> =
                if n_masks + 2 <= spec.prompt_len && n_masks < spec.slots.len() {
                    vec![(rng.below(ncol), slots[n_masks])]
                } else {
                    Vec::new()
                };

            let mut bindings = BTreeMap::new();
            bindings.insert("scene".to_string(), 1);
            let mut label = |col: usize, slot: usize| {
                let l = spec.object_label(col, slot);
                bindings.insert(l.clone(), spec.object_token(col, slot));
                l
            };
            let smp: Vec<String> = edited.iter().map(|&(c, s)| label(c, s)).collect();
            let tmp: Vec<String> = edited.iter().zip(&retarget).map(|(&(_, s), &t)| label(t, s)).collect();
            let ctx: Vec<String> = context.iter().map(|&(c, s)| label(c, s)).collect();

            let mut source_objs = context.clone();
            source_objs.extend(edited.iter().copied());
            let source = prompt_of(spec, world, &source_objs, String::new())?;
            let mut targets = Vec::with_capacity(n_masks);
            for i in 0..n_masks {
                let mut objs = source_objs.clone();
                objs[context.len() + i].0 = retarget[i];
                targets.push(prompt_of(spec, world, &objs, tmp[i].clone())?);
            }
            let image = sample_clean(world, &source, &mut rng)?;
            let masks = edited.iter().map(|&(_, s)| spec.slot_mask(s)).collect();

            let mut tip_parts = vec!["scene".to_string()];
            tip_parts.extend(ctx.iter().cloned());
            tip_parts.extend(tmp.iter().cloned());
            let ein = smp
                .iter()
                .zip(&tmp)
                .map(|(s, t)| format!("turn the {s} into a {t}"))
                .collect::<Vec<_>>()
                .join("; ");
            Ok(ToyCase {
                id: format!("case_{k:02}"),
                image,
                masks,
                tip: tip_parts.join(", "),
                smp,
                tmp,
                ein,
                bindings,
                source,
                targets,
            })
        })
        .collect()
}
