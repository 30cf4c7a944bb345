fn main() {
    for (seed, idx) in [(0u64, 0u64), (0, 1), (0, 2), (0, 3), (1, 5), (2, 9)] {
        let s = miniclip_core::data::gen_sample(seed, idx, 64).unwrap();
        let raw = miniclip_core::data::to_rgb8(&s.image);
        let img = image::RgbImage::from_raw(64, 64, raw).unwrap();
        img.save(format!("/tmp/raster_{seed}_{idx}.png")).unwrap();
        println!("{seed}/{idx}: {}", s.caption);
    }
}
