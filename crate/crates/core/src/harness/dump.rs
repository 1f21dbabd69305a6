//! 16-bit grayscale depth images.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::dataset::DepthDataset;
use crate::harness::eval::Predictor;
use crate::harness::netpbm::{self, normalize_depth};

/// Writes `<name>_pred.pgm` per frame, depth mapped from `[min, max]` onto
/// `[0, 65535]`. With `with_gt`, also `<name>_gt.pgm` and
/// `<name>_pair.pgm` (prediction left, ground truth right).
pub fn cmd_dump_depth(
    predictor: &Predictor,
    dataset: &dyn DepthDataset,
    out_dir: &Path,
    range: (f64, f64),
    with_gt: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (min, max) = range;
    let mut written = Vec::new();
    for i in 0..dataset.len() {
        let frame = dataset.frame(i)?;
        let pred = predictor.predict(std::slice::from_ref(&frame), 1)?.remove(0);
        let (w, h) = (pred.width, pred.height);
        let p = normalize_depth(&pred.values, min, max);
        let path = out_dir.join(format!("{}_pred.pgm", frame.name));
        netpbm::write(&path, &netpbm::gray16(w, h, p.clone()))?;
        written.push(path);
        if with_gt {
            let g = normalize_depth(&frame.depth.to_f64_vec(), min, max);
            let path = out_dir.join(format!("{}_gt.pgm", frame.name));
            netpbm::write(&path, &netpbm::gray16(w, h, g.clone()))?;
            written.push(path);
            let mut pair = Vec::with_capacity(2 * w * h);
            for y in 0..h {
                pair.extend_from_slice(&p[y * w..(y + 1) * w]);
                pair.extend_from_slice(&g[y * w..(y + 1) * w]);
            }
            let path = out_dir.join(format!("{}_pair.pgm", frame.name));
            netpbm::write(&path, &netpbm::gray16(2 * w, h, pair))?;
            written.push(path);
        }
    }
    Ok(written)
}
