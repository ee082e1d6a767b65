//! Structured conditions: project 3D boxes and rasterize lane polylines
//! into per-view condition images, then dump them next to the rendered
//! frames as PPM files for eyeballing.

use mvdiff::conditioning::{project_boxes, rasterize_hdmap};
use mvdiff::dataset::write_ppm;
use mvdiff::scenesim::{export_annotations, generate_scene, render_frame, SceneSpec};

fn main() -> mvdiff::Result<()> {
    let dir = std::env::temp_dir().join("mvdiff_example_conditions");
    std::fs::create_dir_all(&dir)?;

    let world = generate_scene(9, &SceneSpec::default())?;
    let rig = world.rig();
    let ann = export_annotations(&world, &rig);
    let (h, w) = (world.height, world.width);

    for v in 0..3 {
        let rendered = render_frame(&world, &rig, 0, v)?;
        let boxes = project_boxes(&ann.boxes, &rig, 0, v, h, w);
        let lanes = rasterize_hdmap(&ann.lanes, &rig, 0, v, h, w);
        write_ppm(&dir.join(format!("render_v{}.ppm", v)), &rendered)?;
        write_ppm(&dir.join(format!("boxes_v{}.ppm", v)), &boxes)?;
        write_ppm(&dir.join(format!("lanes_v{}.ppm", v)), &lanes)?;
        let box_px = boxes.data().iter().filter(|&&x| x > 0.0).count() / 3;
        let lane_px = lanes.data().iter().filter(|&&x| x > 0.0).count() / 3;
        println!("view {}: {} box pixels, {} lane pixels", v, box_px, lane_px);
    }
    println!("images at {}", dir.display());
    Ok(())
}
