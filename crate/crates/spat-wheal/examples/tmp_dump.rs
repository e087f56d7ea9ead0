use spat_wheal::synth::{generate_case, SynthConfig};
fn main() {
    let cfg = SynthConfig::default();
    let case = generate_case(&cfg, 42).unwrap();
    std::fs::create_dir_all("/tmp/synth_preview").unwrap();
    for k in [0usize, 2, 14, 17, 24, 31] {
        case.stack.directional[k]
            .save(format!("/tmp/synth_preview/img_{:02}.png", k + 1))
            .unwrap();
    }
    case.stack.full_light.save("/tmp/synth_preview/full_light.png").unwrap();
    let n = case.annotations.polygons.iter().filter(|p| p.is_some()).count();
    println!("wheals: {n}, transform: {:?}", case.planted_transform);
}
