//! Synthetic multi-domain data.
//!
//! Class signal and domain signal are disentangled by construction.
//! Content (shared by both classes): a few smooth Gaussian bumps plus a
//! faint low-frequency wave. The class cue is textural: spoof samples
//! carry a coherent oriented grating, live samples carry incoherent
//! grain at matched energy — so the classes differ in texture
//! *structure*, not in any pixel mean or energy a linear probe could
//! read. The domain is purely photometric: per-channel gain, bias, a
//! corner-to-corner illumination ramp, and sensor noise, applied
//! identically to both classes.
//!
//! Content for sample index `i` is drawn from a stream keyed only by
//! `(seed, i)`, so every domain renders the same underlying scene;
//! domain noise is keyed by the domain id's hash, so a domain's samples
//! don't depend on where it sits in a config list.

use crate::io::{self, IoError};
use crate::rng::{derive, standard_normal, Stream};
use rand::Rng;
use std::path::Path;
use thiserror::Error;

pub const DATA_MAGIC: &[u8; 8] = b"TTDGDATA";
pub const DATA_VERSION: u16 = 1;

/// Label conventions: the classifier's logit index 1 is "live".
pub const LABEL_SPOOF: u8 = 0;
pub const LABEL_LIVE: u8 = 1;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("domain `{id}`: {detail}")]
    BadDomain { id: String, detail: String },
    #[error("unknown domain id `{0}`")]
    UnknownDomain(String),
    #[error("n_per_class must be ≥ 1")]
    ZeroSamples,
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Image and depth-label dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageGeometry {
    pub h0: usize,
    pub w0: usize,
    /// Depth-label grid (the feature-map size the depth head predicts).
    pub dh: usize,
    pub dw: usize,
}

impl Default for ImageGeometry {
    fn default() -> Self {
        ImageGeometry { h0: 16, w0: 16, dh: 8, dw: 8 }
    }
}

/// One capture condition: a photometric transform plus sensor noise.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainSpec {
    pub id: String,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub illumination: f64,
    pub noise: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |detail: String| DatagenError::BadDomain { id: self.id.clone(), detail };
        for (i, &g) in self.gain.iter().enumerate() {
            if !(g.is_finite() && g > 0.0) {
                return Err(bad(format!("gain[{i}] = {g}, want positive")));
            }
        }
        if self.bias.iter().any(|b| !b.is_finite()) || !self.illumination.is_finite() {
            return Err(bad("non-finite bias or illumination".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(bad(format!("noise = {}, want ≥ 0", self.noise)));
        }
        Ok(())
    }
}

/// The benchmark's four domains. The first three (used for training in
/// the default split) stay photometrically mild; the last crushes two
/// channels and tilts the illumination, which is what makes the
/// held-out evaluation hard.
pub fn default_domains() -> Vec<DomainSpec> {
    let d = |id: &str, gain: [f64; 3], bias: [f64; 3], illumination: f64, noise: f64| {
        DomainSpec { id: id.into(), gain, bias, illumination, noise }
    };
    vec![
        d("d0", [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 0.0, 0.05),
        d("d1", [1.3, 0.75, 1.1], [0.2, -0.15, 0.1], 0.3, 0.07),
        d("d2", [0.8, 1.25, 0.9], [-0.2, 0.1, 0.25], -0.3, 0.09),
        d("d3", [0.25, 0.22, 1.6], [0.3, -0.25, 0.15], 0.6, 0.05),
    ]
}

/// One generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u32,
    /// `3 × h0 × w0`, row-major, clamped to `[-3, 3]`.
    pub image: Vec<f64>,
    pub cls_label: u8,
    /// `dh × dw`; all zeros for spoof, radial template in `[0,1]` for
    /// live.
    pub depth_label: Vec<f64>,
    /// Ordinal into the owning dataset's domain list.
    pub domain: u32,
}

/// A full generated corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub geometry: ImageGeometry,
    pub domains: Vec<String>,
    pub records: Vec<SampleRecord>,
}

/// The live-face depth label: 1 at the center, falling linearly to 0 at
/// the farthest corner.
pub fn depth_template(dh: usize, dw: usize) -> Vec<f64> {
    let cy = (dh as f64 - 1.0) / 2.0;
    let cx = (dw as f64 - 1.0) / 2.0;
    let rmax = (cy * cy + cx * cx).sqrt();
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        for x in 0..dw {
            let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            out.push(1.0 - r / rmax);
        }
    }
    out
}

/// Three per-channel loadings with mean 1, floored away from zero so
/// no class cue can hide in a single dead channel.
fn chan_loadings(rng: &mut rand_chacha::ChaCha8Rng) -> [f64; 3] {
    let r = [
        rng.gen_range(0.15..1.0),
        rng.gen_range(0.15..1.0),
        rng.gen_range(0.15..1.0),
    ];
    let s: f64 = r.iter().sum();
    [3.0 * r[0] / s, 3.0 * r[1] / s, 3.0 * r[2] / s]
}

/// Pre-style content for sample `index`: identical across domains by
/// construction (its stream never sees a domain).
pub fn content_image(seed: u64, index: u32, spoof: bool, geom: &ImageGeometry) -> Vec<f64> {
    let (h0, w0) = (geom.h0, geom.w0);
    let mut rng = derive(seed, Stream::Content, index as u64, 0);
    let tau = 2.0 * std::f64::consts::PI;

    // smooth scene: three Gaussian bumps, normalized to [-1, 1]
    let mut base = vec![0.0; h0 * w0];
    for _ in 0..3 {
        let cy = rng.gen_range(0.1875 * h0 as f64..0.8125 * h0 as f64);
        let cx = rng.gen_range(0.1875 * w0 as f64..0.8125 * w0 as f64);
        let s = rng.gen_range(0.15625 * h0 as f64..0.3125 * h0 as f64);
        let a = rng.gen_range(0.5..1.2);
        for y in 0..h0 {
            for x in 0..w0 {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                base[y * w0 + x] += a * (-d2 / (2.0 * s * s)).exp();
            }
        }
    }
    let mx = base.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for v in &mut base {
        *v = *v / mx * 2.0 - 1.0;
    }

    let mut img = vec![0.0; 3 * h0 * w0];
    for c in 0..3 {
        img[c * h0 * w0..(c + 1) * h0 * w0].copy_from_slice(&base);
    }

    // faint low-frequency wave, per-channel loading
    let lt = chan_loadings(&mut rng);
    for c in 0..3 {
        let ph0 = rng.gen_range(0.0..tau);
        let ph1 = rng.gen_range(0.0..tau);
        let fr0 = rng.gen_range(0.3..0.8);
        let fr1 = rng.gen_range(0.3..0.8);
        for y in 0..h0 {
            for x in 0..w0 {
                img[c * h0 * w0 + y * w0 + x] += 0.1
                    * lt[c]
                    * (tau * fr0 * x as f64 / w0 as f64 + ph0).sin()
                    * (tau * fr1 * y as f64 / h0 as f64 + ph1).cos();
            }
        }
    }

    if spoof {
        // coherent oriented grating: structured texture, the replay
        // artifact surrogate
        let f = rng.gen_range(5.0..7.5);
        let th = rng.gen_range(0.0..std::f64::consts::PI);
        let ph = rng.gen_range(0.0..tau);
        let amp = rng.gen_range(0.10..0.20);
        let gl = chan_loadings(&mut rng);
        for c in 0..3 {
            for y in 0..h0 {
                for x in 0..w0 {
                    let u = x as f64 * th.cos() + y as f64 * th.sin();
                    let v = -(x as f64) * th.sin() + y as f64 * th.cos();
                    let grid = (tau * f * u / w0 as f64 + ph).sin()
                        * (tau * f * v / w0 as f64 + 0.7 * ph).sin();
                    img[c * h0 * w0 + y * w0 + x] += amp * gl[c] * grid;
                }
            }
        }
    } else {
        // incoherent grain at comparable energy: classes differ in
        // texture structure, not amplitude
        let amp = rng.gen_range(0.10..0.20);
        let gl = chan_loadings(&mut rng);
        for c in 0..3 {
            for i in 0..h0 * w0 {
                img[c * h0 * w0 + i] += amp * gl[c] * 0.5 * standard_normal(&mut rng);
            }
        }
    }
    img
}

/// Apply a domain's photometric transform and noise in place, then
/// clamp to `[-3, 3]`. The transform parameters never depend on the
/// sample's class.
fn apply_domain(
    img: &mut [f64],
    spec: &DomainSpec,
    geom: &ImageGeometry,
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    let (h0, w0) = (geom.h0, geom.w0);
    for c in 0..3 {
        for y in 0..h0 {
            for x in 0..w0 {
                let ramp = 1.0
                    + spec.illumination
                        * ((x as f64 / (w0 as f64 - 1.0) - 0.5)
                            + (y as f64 / (h0 as f64 - 1.0) - 0.5));
                let i = c * h0 * w0 + y * w0 + x;
                let v = img[i] * spec.gain[c] * ramp
                    + spec.bias[c]
                    + spec.noise * standard_normal(rng);
                img[i] = v.clamp(-3.0, 3.0);
            }
        }
    }
}

fn noise_key(spec: &DomainSpec) -> u64 {
    io::fnv1a64(spec.id.as_bytes())
}

/// Generate `2 * n_per_class` samples (classes interleaved, spoof on
/// odd indices) for one domain. Deterministic per `(seed, spec.id)`.
/// Content is keyed by the within-domain index, so every domain shows
/// the same subjects under its own capture conditions; `sample_id` is
/// offset by the domain ordinal to stay unique across the dataset.
pub fn generate_domain(
    spec: &DomainSpec,
    domain_ord: u32,
    n_per_class: usize,
    seed: u64,
    geom: &ImageGeometry,
) -> Result<Vec<SampleRecord>, DatagenError> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(DatagenError::ZeroSamples);
    }
    let template = depth_template(geom.dh, geom.dw);
    let key = noise_key(spec);
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let spoof = i % 2 == 1;
        let mut image = content_image(seed, i as u32, spoof, geom);
        let mut rng = derive(seed, Stream::DomainNoise, key, i as u64);
        apply_domain(&mut image, spec, geom, &mut rng);
        out.push(SampleRecord {
            sample_id: domain_ord * 2 * n_per_class as u32 + i as u32,
            image,
            cls_label: if spoof { LABEL_SPOOF } else { LABEL_LIVE },
            depth_label: if spoof { vec![0.0; geom.dh * geom.dw] } else { template.clone() },
            domain: domain_ord,
        });
    }
    Ok(out)
}

/// Generate every domain in order.
pub fn generate_dataset(
    specs: &[DomainSpec],
    n_per_class: usize,
    seed: u64,
    geom: &ImageGeometry,
) -> Result<Dataset, DatagenError> {
    let mut records = Vec::with_capacity(specs.len() * 2 * n_per_class);
    for (ord, spec) in specs.iter().enumerate() {
        records.extend(generate_domain(spec, ord as u32, n_per_class, seed, geom)?);
    }
    Ok(Dataset {
        geometry: *geom,
        domains: specs.iter().map(|s| s.id.clone()).collect(),
        records,
    })
}

/// Partition domain specs into (retained, held-out).
pub fn leave_one_out_split(
    specs: &[DomainSpec],
    held_out: &str,
) -> Result<(Vec<DomainSpec>, DomainSpec), DatagenError> {
    let mut held = None;
    let mut train = Vec::with_capacity(specs.len().saturating_sub(1));
    for s in specs {
        if s.id == held_out {
            held = Some(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    match held {
        Some(h) => Ok((train, h)),
        None => Err(DatagenError::UnknownDomain(held_out.to_string())),
    }
}

impl Dataset {
    /// Record references split by domain ordinal: (everything else,
    /// the held-out domain).
    pub fn partition(&self, held_ord: u32) -> (Vec<&SampleRecord>, Vec<&SampleRecord>) {
        self.records.iter().partition(|r| r.domain != held_ord)
    }

    pub fn domain_ord(&self, id: &str) -> Result<u32, DatagenError> {
        self.domains
            .iter()
            .position(|d| d == id)
            .map(|p| p as u32)
            .ok_or_else(|| DatagenError::UnknownDomain(id.to_string()))
    }

    /// CSV manifest: one row per sample.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("sample_id,class,domain\n");
        for r in &self.records {
            let class = if r.cls_label == LABEL_LIVE { "live" } else { "spoof" };
            out.push_str(&format!(
                "{},{},{}\n",
                r.sample_id, class, self.domains[r.domain as usize]
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DatagenError> {
        let g = self.geometry;
        let mut payload = Vec::new();
        for name in &self.domains {
            io::push_u32(&mut payload, name.len() as u32);
            payload.extend_from_slice(name.as_bytes());
        }
        for r in &self.records {
            io::push_u32(&mut payload, r.sample_id);
            io::push_u32(&mut payload, r.cls_label as u32);
            io::push_u32(&mut payload, r.domain);
            io::push_f64s(&mut payload, &r.image);
            io::push_f64s(&mut payload, &r.depth_label);
        }
        let fields = [
            self.records.len() as u32,
            g.h0 as u32,
            g.w0 as u32,
            g.dh as u32,
            g.dw as u32,
            self.domains.len() as u32,
        ];
        io::write_container(path, DATA_MAGIC, DATA_VERSION, &fields, &payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset, DatagenError> {
        let (fields, payload) = io::read_container(path, DATA_MAGIC, DATA_VERSION)?;
        if fields.len() != 6 {
            return Err(IoError::Corrupt(format!(
                "dataset header has {} fields, want 6",
                fields.len()
            ))
            .into());
        }
        let n_records = fields[0] as usize;
        let geometry = ImageGeometry {
            h0: fields[1] as usize,
            w0: fields[2] as usize,
            dh: fields[3] as usize,
            dw: fields[4] as usize,
        };
        let n_domains = fields[5] as usize;
        let mut off = 0;
        let mut domains = Vec::with_capacity(n_domains);
        for _ in 0..n_domains {
            let len = io::take_u32(&payload, &mut off)? as usize;
            if off + len > payload.len() {
                return Err(IoError::Corrupt("domain name overruns payload".into()).into());
            }
            let name = String::from_utf8(payload[off..off + len].to_vec())
                .map_err(|_| IoError::Corrupt("domain name is not UTF-8".into()))?;
            off += len;
            domains.push(name);
        }
        let (img_len, dep_len) = (3 * geometry.h0 * geometry.w0, geometry.dh * geometry.dw);
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let sample_id = io::take_u32(&payload, &mut off)?;
            let cls = io::take_u32(&payload, &mut off)?;
            let domain = io::take_u32(&payload, &mut off)?;
            if cls > 1 {
                return Err(IoError::Corrupt(format!("class label {cls} out of range")).into());
            }
            if domain as usize >= domains.len() {
                return Err(
                    IoError::Corrupt(format!("domain ordinal {domain} out of range")).into()
                );
            }
            let image = io::take_f64s(&payload, &mut off, img_len)?;
            let depth_label = io::take_f64s(&payload, &mut off, dep_len)?;
            records.push(SampleRecord {
                sample_id,
                image,
                cls_label: cls as u8,
                depth_label,
                domain,
            });
        }
        if off != payload.len() {
            return Err(IoError::Corrupt(format!(
                "dataset payload has {} trailing bytes",
                payload.len() - off
            ))
            .into());
        }
        Ok(Dataset { geometry, domains, records })
    }
}
