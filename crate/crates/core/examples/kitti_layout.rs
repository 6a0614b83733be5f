//! Exports a synthetic sequence in the KITTI raw layout, then reads it back
//! through the KITTI loader.

use selfdepth::data::{export_kitti_sequence, KittiSequence, SceneConfig, SyntheticSequence};

fn main() -> selfdepth::Result<()> {
    let root = std::env::temp_dir().join(format!("selfdepth-kitti-{}", std::process::id()));
    let seq = SyntheticSequence::new(&SceneConfig { frames: 6, ..SceneConfig::textured(0) })?;
    let frames: Vec<_> = seq.frames.iter().map(|f| f.image.clone()).collect();
    let depths: Vec<_> = seq.frames.iter().map(|f| f.depth.clone()).collect();
    export_kitti_sequence(&root, "demo", &frames, Some(&depths), &seq.scene.intrinsics)?;

    for sample in KittiSequence::open(&root, "demo", 192, 64)? {
        let s = sample?;
        let valid = s.depth_valid.as_ref().map_or(0.0, |m| m.fraction());
        println!("{}: {}x{}, fx {:.1}, depth valid on {:.0}%", s.id, s.width(), s.height(), s.intrinsics.fx, 100.0 * valid);
    }
    println!("written under {}", root.display());
    Ok(())
}
