use xmodal_core::synth::{bright_area, Modality};
use xmodal_wasm::{render_ecg, render_mri, Explorer};

#[test]
fn larger_heart_scale_renders_a_larger_chamber() {
    let small = render_mri(0.8, 60.0, 0.11, 45.0, 0.75);
    let large = render_mri(1.3, 60.0, 0.11, 45.0, 0.75);
    assert_eq!(small.len(), 32 * 32);
    assert!(bright_area(&large) > bright_area(&small));
    assert_eq!(render_ecg(1.0, 60.0, 0.11, 45.0, 0.75).len(), 4 * 256);
    // Out-of-range sliders are clamped rather than rejected.
    assert_eq!(render_mri(9.0, 60.0, 0.11, 45.0, 0.75), render_mri(1.5, 60.0, 0.11, 45.0, 0.75));
}

#[test]
fn explorer_interpolates_and_perturbs() {
    let ex = Explorer::train(120, 3, 3).unwrap();
    assert_eq!(ex.count(), 120);
    let a = ex.interpolate(0, 1, 0.0, Modality::Mri).unwrap();
    let z0 = ex.latent(0).unwrap();
    let r = ex.display_range();
    assert_eq!(a, ex.perturb(0, 2, z0[2], Modality::Mri).unwrap());
    assert!(ex.perturb(0, 2, 2.0 * r[2], Modality::Mri).is_err());
    assert!(ex.interpolate(0, 1, 1.5, Modality::Ecg).is_err());
    assert_eq!(ex.interpolate(0, 1, 0.5, Modality::Ecg).unwrap().len(), 1024);
}
