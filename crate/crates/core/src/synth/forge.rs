//! Splice, copy-move and inpainting forgeries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frontend::jpeg::jpeg_roundtrip;
use crate::tensor::Tensor;

use super::texture::gen_base;
use super::{quantize, Label, Operation, Provenance, Region, Sample};

fn mask_tensor(mask: &[bool], h: usize, w: usize) -> Tensor<f32> {
    Tensor::new(&[1, h, w], mask.iter().map(|&m| m as u8 as f32).collect()).expect("mask shape")
}

fn compress(image: Tensor<f32>, quality: Option<u32>) -> Result<Tensor<f32>> {
    match quality {
        Some(q) => jpeg_roundtrip(&image, q),
        None => Ok(image),
    }
}

/// Host image, optionally JPEG-compressed, with an empty mask.
pub fn gen_authentic(seed: u64, height: usize, width: usize, host_q: Option<u32>) -> Result<Sample> {
    let image = compress(gen_base(seed, height, width), host_q)?;
    Ok(Sample {
        image,
        mask: Tensor::zeros(&[1, height, width]),
        label: Label::Authentic,
        provenance: Provenance {
            operation: Operation::Authentic,
            seed,
            donor_seed: None,
            region: None,
            source_offset: None,
            host_quality: host_q,
            donor_quality: None,
        },
    })
}

/// Pastes donor pixels into `region` of a host. Pixel `(y, x)` takes the
/// donor pixel at `(y + dy, x + dx)`, wrapping around the donor's borders.
///
/// The host is compressed at `host_q` and the donor at `donor_q` before the
/// paste; the result is not recompressed.
pub fn gen_splice(
    host: &Tensor<f32>,
    donor: &Tensor<f32>,
    region: &Region,
    donor_offset: (i64, i64),
    host_q: Option<u32>,
    donor_q: Option<u32>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = (host.shape()[1], host.shape()[2]);
    if donor.shape() != host.shape() {
        return Err(Error::ShapeMismatch {
            op: "gen_splice",
            lhs: host.shape().to_vec(),
            rhs: donor.shape().to_vec(),
        });
    }
    region.check(h, w)?;
    let mut out = compress(host.clone(), host_q)?;
    let donor = compress(donor.clone(), donor_q)?;
    let mask = region.rasterize(h, w);
    let plane = h * w;
    let (dy, dx) = donor_offset;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let y = ((i / w) as i64 + dy).rem_euclid(h as i64) as usize;
            let x = ((i % w) as i64 + dx).rem_euclid(w as i64) as usize;
            for c in 0..3 {
                out.data_mut()[c * plane + i] = donor.data()[c * plane + y * w + x];
            }
        }
    }
    Ok((out, mask_tensor(&mask, h, w)))
}

/// Copies the pixels at `region` shifted by `offset = (dy, dx)` onto
/// `region` itself. The two areas must not overlap.
pub fn gen_copymove(image: &Tensor<f32>, region: &Region, offset: (i64, i64)) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    region.check(h, w)?;
    let dst = region.rasterize(h, w);
    let plane = h * w;
    let mut src_idx = Vec::new();
    for (i, &m) in dst.iter().enumerate() {
        if !m {
            continue;
        }
        let (y, x) = ((i / w) as i64 + offset.0, (i % w) as i64 + offset.1);
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            return Err(Error::invalid("copy-move source leaves the image"));
        }
        let j = y as usize * w + x as usize;
        if dst[j] {
            return Err(Error::invalid("copy-move source overlaps its destination"));
        }
        src_idx.push((i, j));
    }
    let mut out = image.clone();
    for c in 0..3 {
        for &(i, j) in &src_idx {
            out.data_mut()[c * plane + i] = image.data()[c * plane + j];
        }
    }
    Ok((out, mask_tensor(&dst, h, w)))
}

/// Fills `region` from its surroundings: unknown pixels adjacent to known
/// ones take the mean of their known 3×3 neighbours, ring by ring inward,
/// then the fill is box-blurred twice.
pub fn gen_inpaint(image: &Tensor<f32>, region: &Region) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    region.check(h, w)?;
    let mask = region.rasterize(h, w);
    if mask.iter().all(|&m| m) {
        return Err(Error::invalid("inpaint region covers the whole image"));
    }
    let plane = h * w;
    let mut out = image.clone();
    let mut known: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let neighbours = |i: usize| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        (-1isize..=1)
            .flat_map(move |dy| (-1isize..=1).map(move |dx| (y + dy, x + dx)))
            .filter(move |&(yy, xx)| yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && (yy, xx) != (y, x))
            .map(move |(yy, xx)| yy as usize * w + xx as usize)
    };
    loop {
        let ring: Vec<usize> = (0..plane)
            .filter(|&i| !known[i] && neighbours(i).any(|j| known[j]))
            .collect();
        if ring.is_empty() {
            break;
        }
        for &i in &ring {
            let src: Vec<usize> = neighbours(i).filter(|&j| known[j]).collect();
            for c in 0..3 {
                let d = out.data();
                let mean = src.iter().map(|&j| d[c * plane + j]).sum::<f32>() / src.len() as f32;
                out.data_mut()[c * plane + i] = mean;
            }
        }
        for &i in &ring {
            known[i] = true;
        }
    }
    for _ in 0..2 {
        let prev = out.clone();
        for i in (0..plane).filter(|&i| mask[i]) {
            let idx: Vec<usize> = neighbours(i).chain(std::iter::once(i)).collect();
            for c in 0..3 {
                let s: f32 = idx.iter().map(|&j| prev.data()[c * plane + j]).sum();
                out.data_mut()[c * plane + i] = s / idx.len() as f32;
            }
        }
    }
    quantize(&mut out);
    Ok((out, mask_tensor(&mask, h, w)))
}

/// Random shift that is not a multiple of the 8×8 JPEG block in both axes.
fn off_grid_offset(rng: &mut impl Rng, height: usize, width: usize) -> (i64, i64) {
    loop {
        let dy = rng.random_range(-(height as i64) / 2..=height as i64 / 2);
        let dx = rng.random_range(-(width as i64) / 2..=width as i64 / 2);
        if dy % 8 != 0 || dx % 8 != 0 {
            return (dy, dx);
        }
    }
}

/// Knobs for [`generate`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeConfig {
    /// Region side as a fraction of the image side.
    pub region_min: f64,
    pub region_max: f64,
    /// Host and donor JPEG quality ranges (inclusive).
    pub host_quality: (u32, u32),
    pub donor_quality: (u32, u32),
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            region_min: 0.2,
            region_max: 0.45,
            host_quality: (85, 98),
            donor_quality: (50, 80),
        }
    }
}

/// Generates one sample of the given kind from a per-sample seed.
pub fn generate(op: Operation, seed: u64, height: usize, width: usize, cfg: &ForgeConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let host_seed: u64 = rng.random();
    let host_q = rng.random_range(cfg.host_quality.0..=cfg.host_quality.1);
    if op == Operation::Authentic {
        let mut s = gen_authentic(host_seed, height, width, Some(host_q))?;
        s.provenance.seed = seed;
        return Ok(s);
    }
    let mut provenance = Provenance {
        operation: op,
        seed,
        donor_seed: None,
        region: None,
        source_offset: None,
        host_quality: Some(host_q),
        donor_quality: None,
    };
    let host = gen_base(host_seed, height, width);
    let (image, mask) = loop {
        let region = Region::random(&mut rng, height, width, cfg.region_min, cfg.region_max);
        match op {
            Operation::Splice => {
                let donor_seed: u64 = rng.random();
                let donor_q = rng.random_range(cfg.donor_quality.0..=cfg.donor_quality.1);
                let donor = gen_base(donor_seed, height, width);
                let offset = off_grid_offset(&mut rng, height, width);
                provenance.donor_seed = Some(donor_seed);
                provenance.donor_quality = Some(donor_q);
                provenance.region = Some(region.clone());
                provenance.source_offset = Some(offset);
                break gen_splice(&host, &donor, &region, offset, Some(host_q), Some(donor_q))?;
            }
            Operation::CopyMove => {
                let (dy, dx) = off_grid_offset(&mut rng, height, width);
                let compressed = jpeg_roundtrip(&host, host_q)?;
                if let Ok(r) = gen_copymove(&compressed, &region, (dy, dx)) {
                    provenance.region = Some(region.clone());
                    provenance.source_offset = Some((dy, dx));
                    break r;
                }
            }
            Operation::Inpaint => {
                let compressed = jpeg_roundtrip(&host, host_q)?;
                provenance.region = Some(region.clone());
                break gen_inpaint(&compressed, &region)?;
            }
            Operation::Authentic => unreachable!(),
        }
    };
    Ok(Sample {
        image,
        mask,
        label: Label::Forged,
        provenance,
    })
}
