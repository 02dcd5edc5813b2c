use emseg::geom::{chunk_lines, generate_candidates, PolarErrorModel};
use emseg::io;
use emseg::raster::rasterize_buffer;

fn main() {
    let (noisy, _) = io::read_polylines(std::path::Path::new("/tmp/run1/scene/noisy.json")).unwrap();
    for (i, l) in noisy.iter().enumerate() {
        let ys: Vec<f64> = l.vertices().iter().map(|v| v.y).collect();
        let xs: Vec<f64> = l.vertices().iter().map(|v| v.x).collect();
        println!(
            "line {i}: {} vertices, x in [{:.2}, {:.2}], y in [{:.2}, {:.2}], arc {:.2}",
            l.vertices().len(),
            xs.iter().cloned().fold(f64::INFINITY, f64::min),
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            ys.iter().cloned().fold(f64::INFINITY, f64::min),
            ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            l.arc_length()
        );
    }
    let chunks = chunk_lines(&noisy, 20.0).unwrap();
    println!("{} chunks", chunks.len());
    let model = PolarErrorModel::new(1.0, std::f64::consts::FRAC_PI_4, 9.0).unwrap();
    for c in &chunks {
        let set = generate_candidates(c, 9, 1.0, &model).unwrap();
        for (k, cand) in set.candidates.iter().enumerate() {
            let r = rasterize_buffer(&[cand.clone()], 2.0, 256, 256, 1.0).unwrap();
            if r.count_ones() == 0 {
                let v0 = cand.vertices()[0];
                let v1 = *cand.vertices().last().unwrap();
                println!(
                    "chunk {} (parent {}, arc {:.3}, verts {}): candidate {} offset {} EMPTY; first ({:.2},{:.2}) last ({:.2},{:.2})",
                    c.index, c.parent_id, c.arc_length(), c.vertices().len(), k, set.offsets[k], v0.x, v0.y, v1.x, v1.y
                );
            }
        }
    }
    println!("done");
}
