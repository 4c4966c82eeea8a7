//! Magnitude previews as binary PGM images.

use std::path::{Path, PathBuf};

use mrilab::mri::percentile;
use mrilab::tensor::{load_tensor, CTensor};
use mrilab::Error;

/// Brightness gain used for difference images.
pub const DIFF_GAIN: f64 = 2.5;

/// Per-pixel magnitude; rank-3 tensors are combined by root sum of squares
/// over the leading axis.
pub fn magnitude(t: &CTensor) -> Result<(usize, usize, Vec<f64>), Error> {
    match t.shape() {
        [h, w] => Ok((*h, *w, t.data().iter().map(|v| v.norm() as f64).collect())),
        [c, h, w] => {
            let n = h * w;
            let mut m = vec![0.0; n];
            for k in 0..*c {
                for (acc, v) in m.iter_mut().zip(&t.data()[k * n..(k + 1) * n]) {
                    *acc += v.norm_sqr() as f64;
                }
            }
            Ok((*h, *w, m.into_iter().map(f64::sqrt).collect()))
        }
        s => Err(Error::Shape(format!("quicklook needs a rank-2 or rank-3 tensor, got {s:?}"))),
    }
}

/// 8-bit P5 image of `gain·v/scale`, clamped to [0, 255].
pub fn pgm_bytes(h: usize, w: usize, values: &[f64], scale: f64, gain: f64) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| {
        if scale > 0.0 {
            (255.0 * gain * v / scale).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Writes a magnitude preview normalized to the 99th percentile, or, with a
/// reference, the difference `|x − ref|` at `DIFF_GAIN` brightness relative to
/// the reference's 99th percentile.
pub fn quicklook(path: &Path, reference: Option<&Path>, out: Option<&Path>) -> Result<PathBuf, Error> {
    let t = load_tensor(path)?;
    let bytes = match reference {
        None => {
            let (h, w, m) = magnitude(&t)?;
            pgm_bytes(h, w, &m, percentile(&m, 99.0), 1.0)
        }
        Some(r) => {
            let rt = load_tensor(r)?;
            if rt.shape() != t.shape() {
                return Err(Error::Shape(format!("reference {:?} vs image {:?}", rt.shape(), t.shape())));
            }
            let (h, w, rm) = magnitude(&rt)?;
            let diff = CTensor::new(t.shape().to_vec(), t.data().iter().zip(rt.data()).map(|(a, b)| a - b).collect())?;
            let (_, _, dm) = magnitude(&diff)?;
            pgm_bytes(h, w, &dm, percentile(&rm, 99.0), DIFF_GAIN)
        }
    };
    let dest = out.map(Path::to_path_buf).unwrap_or_else(|| {
        let suffix = if reference.is_some() { "diff.pgm" } else { "pgm" };
        path.with_extension(suffix)
    });
    std::fs::write(&dest, bytes).map_err(|e| Error::io(&dest, e))?;
    Ok(dest)
}
