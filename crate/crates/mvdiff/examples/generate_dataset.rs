//! Generate a small synthetic driving dataset and print what's in it:
//! scene attributes, actor tracks, and per-view token phrases.

use mvdiff::dataset::{list_scenes, read_scene, write_scene};
use mvdiff::scenesim::{export_annotations, generate_scene, SceneSpec};

fn main() -> mvdiff::Result<()> {
    let dir = std::env::temp_dir().join("mvdiff_example_dataset");
    let _ = std::fs::remove_dir_all(&dir);

    let spec = SceneSpec { actors: 3, horizon: 6, views: 6, width: 80, height: 48, ..Default::default() };
    for i in 0..3u64 {
        let world = generate_scene(i, &spec)?;
        write_scene(&dir.join(format!("scene_{:03}", i)), &world)?;
    }

    for name in list_scenes(&dir)? {
        let (world, frames) = read_scene(&dir.join(&name))?;
        let (tod, weather) = world.attributes[0];
        println!(
            "{}: {} frames x {} views, {} actors, {} {}",
            name,
            world.horizon,
            world.views(),
            world.actors.len(),
            tod.token(),
            weather.token()
        );
        let ann = export_annotations(&world, &world.rig());
        println!("  boxes: {}, first phrase: {:?}", ann.boxes.len(), ann.tokens[0]);
        println!("  frames tensor: {:?}", frames.shape());
    }
    println!("dataset at {}", dir.display());
    Ok(())
}
