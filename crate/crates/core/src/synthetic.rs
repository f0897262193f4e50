//! Small generated datasets in the on-disk layout understood by [`crate::data`].

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Domain, Split};
use crate::Result;

/// Frame counts per subset as `(name, train, test)`, identical for both domains.
pub const IRVI_SUBSETS: [(&str, usize, usize); 6] = [
    ("traffic", 17000, 1000),
    ("monitoring/sub-1", 1384, 347),
    ("monitoring/sub-2", 1040, 260),
    ("monitoring/sub-3", 1232, 308),
    ("monitoring/sub-4", 672, 169),
    ("monitoring/sub-5", 752, 188),
];

/// A bright square sliding over a static background.
#[derive(Debug, Clone)]
pub struct MovingSquares {
    pub subset: String,
    pub size: u32,
    pub train_clips: usize,
    pub test_clips: usize,
    pub frames_per_clip: usize,
    pub seed: u64,
}

impl Default for MovingSquares {
    /// 200 training frames per domain.
    fn default() -> Self {
        Self {
            subset: "squares".into(),
            size: 32,
            train_clips: 4,
            test_clips: 1,
            frames_per_clip: 50,
            seed: 7,
        }
    }
}

struct Track {
    pos: (f64, f64),
    vel: (f64, f64),
    color: [u8; 3],
}

impl Track {
    fn random(rng: &mut ChaCha8Rng, size: u32, side: u32) -> Self {
        let room = (size - side) as f64;
        let speed = (size as f64 / 32.0).max(1.0);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let palette = [[220, 40, 40], [240, 200, 30], [40, 200, 80], [200, 60, 220]];
        Self {
            pos: (rng.random_range(0.0..room), rng.random_range(0.0..room)),
            vel: (speed * angle.cos(), speed * angle.sin()),
            color: palette[rng.random_range(0..palette.len())],
        }
    }

    fn advance(&mut self, room: f64) {
        for (p, v) in [(&mut self.pos.0, &mut self.vel.0), (&mut self.pos.1, &mut self.vel.1)] {
            *p += *v;
            if *p < 0.0 {
                *p = -*p;
                *v = -*v;
            } else if *p > room {
                *p = 2.0 * room - *p;
                *v = -*v;
            }
        }
    }
}

fn render(domain: Domain, size: u32, side: u32, track: &Track) -> RgbImage {
    let (x0, y0) = (track.pos.0.round() as u32, track.pos.1.round() as u32);
    RgbImage::from_fn(size, size, |x, y| {
        let inside = x >= x0 && x < x0 + side && y >= y0 && y < y0 + side;
        let t = y as f64 / size as f64;
        match (domain, inside) {
            // infrared: single intensity, warm object on a cool background
            (Domain::X, true) => Rgb([230, 230, 230]),
            (Domain::X, false) => {
                let v = (30.0 + 40.0 * t) as u8;
                Rgb([v, v, v])
            }
            (Domain::Y, true) => Rgb(track.color),
            (Domain::Y, false) => Rgb([(60.0 + 60.0 * t) as u8, (90.0 + 70.0 * t) as u8, (160.0 - 80.0 * t) as u8]),
        }
    })
}

impl MovingSquares {
    /// Writes `<root>/<subset>/<split>/<domain>/clip_<k>/frame_%06d.png`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let side = (self.size / 4).max(2);
        let room = (self.size - side) as f64;
        for (d, domain) in [Domain::X, Domain::Y].into_iter().enumerate() {
            // independent streams keep the two domains unpaired
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(31).wrapping_add(d as u64));
            for (split, clips) in [(Split::Train, self.train_clips), (Split::Test, self.test_clips)] {
                for clip in 0..clips {
                    let dir = self.clip_dir(root, split, domain, clip);
                    fs::create_dir_all(&dir)?;
                    let mut track = Track::random(&mut rng, self.size, side);
                    for f in 0..self.frames_per_clip {
                        render(domain, self.size, side, &track)
                            .save(dir.join(format!("frame_{f:06}.png")))
                            .map_err(|e| crate::Error::Image {
                                path: dir.clone(),
                                reason: e.to_string(),
                            })?;
                        track.advance(room);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn clip_dir(&self, root: &Path, split: Split, domain: Domain, clip: usize) -> PathBuf {
        root.join(&self.subset)
            .join(split.dir_name())
            .join(domain.dir_name())
            .join(format!("clip_{clip:02}"))
    }
}

/// Creates empty frame files, `(name, train, test)` per subset.
pub fn write_empty_layout(root: &Path, subsets: &[(&str, usize, usize)]) -> Result<()> {
    for &(name, train, test) in subsets {
        for (split, count) in [(Split::Train, train), (Split::Test, test)] {
            for domain in [Domain::X, Domain::Y] {
                let dir = root.join(name).join(split.dir_name()).join(domain.dir_name());
                fs::create_dir_all(&dir)?;
                for f in 0..count {
                    fs::File::create(dir.join(format!("frame_{f:06}.png")))?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;

    #[test]
    fn moving_squares_layout_loads() {
        let dir = tempfile::tempdir().unwrap();
        let squares = MovingSquares {
            frames_per_clip: 5,
            train_clips: 2,
            ..MovingSquares::default()
        };
        squares.write(dir.path()).unwrap();
        let m = load_manifest(dir.path()).unwrap();
        let s = m.summary();
        assert_eq!(s.subsets.len(), 1);
        assert_eq!(s.subsets[0].train.infrared_frames, 10);
        assert_eq!(s.subsets[0].test.visible_frames, 5);
    }

    #[test]
    fn infrared_frames_are_single_intensity() {
        let dir = tempfile::tempdir().unwrap();
        let squares = MovingSquares {
            frames_per_clip: 3,
            train_clips: 1,
            test_clips: 0,
            ..MovingSquares::default()
        };
        squares.write(dir.path()).unwrap();
        let path = squares.clip_dir(dir.path(), Split::Train, Domain::X, 0).join("frame_000001.png");
        let img = image::open(path).unwrap().to_rgb8();
        assert!(img.pixels().all(|p| p.0[0] == p.0[1] && p.0[1] == p.0[2]));
    }
}
