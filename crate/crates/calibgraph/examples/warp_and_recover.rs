//! Round-trip the core geometry: build a virtual camera, derive its
//! ground-plane homography, render a view of the BEV, and recover the camera
//! extrinsics back from the homography.
//!
//! ```sh
//! cargo run --release --example warp_and_recover
//! ```

use calibgraph::geometry::{
    camera_pose, decompose_homography, homography_from_plane_camera, invert,
    rotation_angle_between, warp_labels, Intrinsics,
};
use calibgraph::loss::iou;
use calibgraph::scene::{generate_procedural_bev, ProceduralSpec};

fn main() -> anyhow::Result<()> {
    let bev = generate_procedural_bev(&ProceduralSpec::default(), 7)?;
    let s = bev.meters_per_pixel;

    // A camera 8 m above the ground, tilted 50 degrees below horizontal.
    let k = Intrinsics::centered(160.0, (128, 128))?;
    let pose = camera_pose((30.0, 26.0), 8.0, 0.9, 0.87, 0.0)?;
    let h = homography_from_plane_camera(&k, &pose, s)?;
    println!("homography (row-major): {:?}", h.to_row_major());

    let view = warp_labels(&bev.labels.view(), &h, (128, 128), bev.palette.background_id())?;
    let back = warp_labels(&view.view(), &invert(&h)?, (bev.width(), bev.height()), 0)?;
    let roundtrip = iou(&back.view(), &bev.labels.view(), &bev.palette)?;
    println!("BEV -> view -> BEV IoU (whole map, includes unseen area): {roundtrip:.3}");

    let recovered = decompose_homography(&h, &k, s)?;
    let rot_err = rotation_angle_between(&recovered.extrinsics.rotation, &pose.rotation);
    let trans_err = (recovered.extrinsics.translation - pose.translation).norm();
    println!(
        "recovered extrinsics: height {:.3} m (true 8.000), rotation error {rot_err:.2e} rad, \
         translation error {trans_err:.2e} m",
        recovered.extrinsics.height_above_plane()
    );
    Ok(())
}
