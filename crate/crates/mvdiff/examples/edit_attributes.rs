//! Attribute editing on the simulator itself: render the same scene under
//! different time-of-day and weather tokens and measure the palette shift
//! the diffusion model is trained to reproduce.

use mvdiff::evalx::attribute_edit_check;
use mvdiff::scenesim::{
    export_annotations, generate_scene, render_clip, SceneSpec, TimeOfDay, Weather,
};

fn main() -> mvdiff::Result<()> {
    let spec = SceneSpec::default();
    let mut world = generate_scene(77, &spec)?;
    for a in world.attributes.iter_mut() {
        *a = (TimeOfDay::Day, Weather::Sunny);
    }
    let rig = world.rig();
    let ann = export_annotations(&world, &rig);
    let day = render_clip(&world, &rig)?;

    for (tod, wx) in [
        (TimeOfDay::Night, Weather::Sunny),
        (TimeOfDay::Day, Weather::Rainy),
        (TimeOfDay::Day, Weather::Snowy),
        (TimeOfDay::Night, Weather::Snowy),
    ] {
        for a in world.attributes.iter_mut() {
            *a = (tod, wx);
        }
        let edited = render_clip(&world, &rig)?;
        let ratio = attribute_edit_check(&edited, &day, &ann.boxes, &rig)?;
        println!("day/sunny -> {}/{}: ground luminance ratio {:.3}", tod.token(), wx.token(), ratio);
    }
    Ok(())
}
