//! A plain-loop generator forward pass, written without the graph engine so
//! the library's forward can be checked against it.

use styledomain::arch::{GeneratorWeights, LayerKind, SamplerConfig};

fn slot(w: &GeneratorWeights, name: &str) -> Vec<f64> {
    w.tensor(name).unwrap_or_else(|| panic!("missing {name}")).data().to_vec()
}

fn lrelu(v: f64) -> f64 {
    std::f64::consts::SQRT_2 * if v >= 0.0 { v } else { 0.2 * v }
}

/// Row-major `rows × x.len()` matrix times `x`.
pub fn matvec(m: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    assert_eq!(m.len(), rows * cols);
    (0..rows)
        .map(|r| (0..cols).map(|c| m[r * cols + c] * x[c]).sum())
        .collect()
}

/// Truncated `w` for latent `z`.
pub fn mapping(w: &GeneratorWeights, z: &[f64], psi: f64) -> Vec<f64> {
    let d = z.len();
    let ms = z.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let mut x: Vec<f64> = z.iter().map(|v| v / (ms + 1e-8).sqrt()).collect();
    for l in 0..w.descriptor().mapping_layers {
        let m = slot(w, &format!("mapping.{l}.weight"));
        let b = slot(w, &format!("mapping.{l}.bias"));
        x = matvec(&m, d, &x).iter().zip(&b).map(|(a, b)| lrelu(a + b)).collect();
    }
    x.iter()
        .zip(w.w_avg().data())
        .map(|(v, a)| a + psi * (v - a))
        .collect()
}

pub fn styles(w: &GeneratorWeights, wl: &[f64]) -> Vec<Vec<f64>> {
    w.descriptor()
        .style_layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let a = slot(w, &format!("affine.{i}.weight"));
            let b = slot(w, &format!("affine.{i}.bias"));
            matvec(&a, l.in_channels, wl).iter().zip(&b).map(|(x, y)| x + y).collect()
        })
        .collect()
}

/// Zero-padded "same" cross-correlation of `c × n × n` input.
fn conv(x: &[f64], c: usize, n: usize, k: &[f64], o: usize, ks: usize) -> Vec<f64> {
    let p = (ks / 2) as isize;
    let mut out = vec![0.0; o * n * n];
    for oc in 0..o {
        for y in 0..n {
            for xx in 0..n {
                let mut acc = 0.0;
                for ic in 0..c {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let sy = y as isize + ky as isize - p;
                            let sx = xx as isize + kx as isize - p;
                            if sy < 0 || sx < 0 || sy >= n as isize || sx >= n as isize {
                                continue;
                            }
                            acc += k[((oc * c + ic) * ks + ky) * ks + kx] * x[(ic * n + sy as usize) * n + sx as usize];
                        }
                    }
                }
                out[(oc * n + y) * n + xx] = acc;
            }
        }
    }
    out
}

fn upsample(x: &[f64], c: usize, n: usize) -> Vec<f64> {
    let m = 2 * n;
    let mut out = vec![0.0; c * m * m];
    for ch in 0..c {
        for y in 0..m {
            for xx in 0..m {
                out[(ch * m + y) * m + xx] = x[(ch * n + y / 2) * n + xx / 2];
            }
        }
    }
    out
}

/// Image for the given styles. `offsets` are `(block resolution, conv
/// offsets..., trgb offset)` as flat `O × I` arrays.
pub fn synthesize(
    w: &GeneratorWeights,
    styles: &[Vec<f64>],
    offsets: Option<(usize, &[Vec<f64>])>,
    cfg: &SamplerConfig,
) -> Vec<f64> {
    let desc = w.descriptor();
    let (base, c0) = desc.channel_schedule[0];
    let mut x = slot(w, "synthesis.const");
    let (mut n, mut c) = (base, c0);
    let mut rgb: Option<Vec<f64>> = None;
    let mut conv_idx = 0;
    for (si, layer) in desc.style_layers.iter().enumerate() {
        let res = layer.resolution;
        let (prefix, out_ch) = match layer.kind {
            LayerKind::Conv => (format!("synthesis.b{res}.conv{conv_idx}"), layer.out_channels),
            LayerKind::Trgb => (format!("synthesis.b{res}.torgb"), 3),
        };
        let ks = layer.kernel_size;
        let taps = ks * ks;
        let mut k = slot(w, &format!("{prefix}.weight"));
        if let Some((_, deltas)) = offsets.filter(|(b, _)| *b == res) {
            let delta = match layer.kind {
                LayerKind::Conv => &deltas[conv_idx],
                LayerKind::Trgb => deltas.last().unwrap(),
            };
            for (oi, d) in delta.iter().enumerate() {
                for tap in 0..taps {
                    k[oi * taps + tap] += d;
                }
            }
        }
        let s = &styles[si];
        for (idx, v) in k.iter_mut().enumerate() {
            *v *= s[(idx / taps) % layer.in_channels];
        }
        match layer.kind {
            LayerKind::Conv => {
                let row = layer.in_channels * taps;
                for o in 0..out_ch {
                    let r = &mut k[o * row..(o + 1) * row];
                    let norm = (r.iter().map(|v| v * v).sum::<f64>() + 1e-8).sqrt();
                    r.iter_mut().for_each(|v| *v /= norm);
                }
                if layer.upsample {
                    x = upsample(&x, c, n);
                    n *= 2;
                }
                let mut y = conv(&x, c, n, &k, out_ch, ks);
                let strength = slot(w, &format!("{prefix}.noise_strength"))[0];
                let noise = cfg.noise_plane(si, res);
                let bias = slot(w, &format!("{prefix}.bias"));
                for o in 0..out_ch {
                    for p in 0..n * n {
                        let mut v = y[o * n * n + p];
                        if let Some(noise) = &noise {
                            v += strength * noise.data()[p];
                        }
                        y[o * n * n + p] = lrelu(v + bias[o]);
                    }
                }
                x = y;
                c = out_ch;
                conv_idx += 1;
            }
            LayerKind::Trgb => {
                let mut y = conv(&x, c, n, &k, 3, ks);
                let bias = slot(w, &format!("{prefix}.bias"));
                for ch in 0..3 {
                    y[ch * n * n..(ch + 1) * n * n].iter_mut().for_each(|v| *v += bias[ch]);
                }
                rgb = Some(match rgb {
                    Some(prev) => upsample(&prev, 3, n / 2).iter().zip(&y).map(|(a, b)| a + b).collect(),
                    None => y,
                });
                conv_idx = 0;
            }
        }
    }
    rgb.expect("at least one block")
}

/// `z -> image` with optional style shifts added before synthesis.
pub fn generate(w: &GeneratorWeights, z: &[f64], delta: Option<&[Vec<f64>]>, cfg: &SamplerConfig) -> Vec<f64> {
    let mut s = styles(w, &mapping(w, z, cfg.truncation_psi));
    if let Some(delta) = delta {
        for (layer, d) in s.iter_mut().zip(delta) {
            layer.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
    }
    synthesize(w, &s, None, cfg)
}
