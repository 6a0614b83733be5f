//! Bin centres under both centre formulas, depth from a probability map,
//! the top-20% variance mask and the fused depth.

use selfdepth::geometry::DepthMap;
use selfdepth::rng::RngState;
use selfdepth::tensor::Tensor;
use selfdepth::uncertainty::{bin_centers, depth_from_probs, fuse_depth, uncertainty_mask, BinConfig, CenterFormula, ProbMap, VarianceMap};

fn main() -> selfdepth::Result<()> {
    let widths = [0.1, 0.2, 0.3, 0.4];
    for formula in [CenterFormula::Adabins, CenterFormula::AsWritten] {
        let cfg = BinConfig { n: 4, d_min: 1.0, d_max: 11.0, center_formula: formula };
        println!("{formula:?}: {:?}", bin_centers(&widths, &cfg)?);
    }

    let mut rng = RngState::new(3);
    let (h, w) = (4, 5);
    let logits: Vec<f64> = (0..4 * h * w).map(|_| 2.0 * rng.normal()).collect();
    let probs = Tensor::from_fn([4, h, w], |i| {
        let p = i % (h * w);
        let z: f64 = (0..4).map(|k| logits[k * h * w + p].exp()).sum();
        logits[i].exp() / z
    });
    let centers = bin_centers(&widths, &BinConfig { n: 4, d_min: 1.0, d_max: 11.0, center_formula: CenterFormula::Adabins })?;
    let pre = depth_from_probs(&ProbMap::new(probs)?, &centers)?;
    let post = DepthMap::new(pre.tensor().scale(1.1))?;

    let sigma2 = VarianceMap::new(Tensor::from_fn([1, h, w], |i| (i as f64 + 1.0) * 0.01))?;
    let (m_u, eps) = uncertainty_mask(&sigma2, 0.8)?;
    let fused = fuse_depth(&pre, &post, &m_u)?;
    println!("ε = {eps:.2}, refined pixels: {} of {}", m_u.count(), h * w);
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| format!("{:6.2}{}", fused.at(y, x), if m_u.get(y, x) { '*' } else { ' ' })).collect();
        println!("{}", row.join(" "));
    }
    Ok(())
}
