//! Deterministic PNG line charts for training logs: no text beyond numeric
//! tick labels, rendered with a tiny built-in glyph set, so identical inputs
//! produce byte-identical images.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use diffrect_core::{contract, Error, Result};

const WIDTH: usize = 800;
const HEIGHT: usize = 500;
const MARGIN_LEFT: usize = 70;
const MARGIN_RIGHT: usize = 16;
const MARGIN_TOP: usize = 16;
const MARGIN_BOTTOM: usize = 36;

const BACKGROUND: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [0, 0, 0];
const GRID: [u8; 3] = [225, 225, 225];
const SERIES: [u8; 3] = [31, 119, 180];

/// 3×5 glyphs for numeric labels; one row per entry, three low bits used.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        'e' | 'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        _ => [0b000, 0b000, 0b000, 0b000, 0b000],
    }
}

struct Canvas {
    pix: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        let mut pix = Vec::with_capacity(WIDTH * HEIGHT * 3);
        for _ in 0..WIDTH * HEIGHT {
            pix.extend_from_slice(&BACKGROUND);
        }
        Self { pix }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            let i = (y as usize * WIDTH + x as usize) * 3;
            self.pix[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: [u8; 3]) {
        let (x0, y0) = (a.0.round() as i64, a.1.round() as i64);
        let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Draws `text` with its top-left corner at `(x, y)`, scale 2.
    fn text(&mut self, x: i64, y: i64, text: &str, c: [u8; 3]) {
        const S: i64 = 2;
        for (k, ch) in text.chars().enumerate() {
            let rows = glyph(ch);
            for (r, row) in rows.iter().enumerate() {
                for col in 0..3 {
                    if row >> (2 - col) & 1 == 1 {
                        for dy in 0..S {
                            for dx in 0..S {
                                self.set(
                                    x + (k as i64 * 4 + col) * S + dx,
                                    y + r as i64 * S + dy,
                                    c,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), WIDTH as u32, HEIGHT as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::parse(path, format!("png write: {e}")))?;
        writer
            .write_image_data(&self.pix)
            .map_err(|e| Error::parse(path, format!("png write: {e}")))
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 10000.0 || a < 0.001 {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders one polyline over a gridded frame with numeric tick labels.
pub fn line_chart(points: &[(f64, f64)], path: &Path) -> Result<()> {
    contract!(!points.is_empty(), "nothing to plot for {}", path.display());
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        contract!(x.is_finite() && y.is_finite(), "non-finite point ({x}, {y})");
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    if pad > 0.0 {
        y0 -= pad;
        y1 += pad;
    } else {
        y0 -= 0.5;
        y1 += 0.5;
    }

    let px = |x: f64| {
        MARGIN_LEFT as f64 + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) as f64
    };
    let py = |y: f64| {
        (HEIGHT - MARGIN_BOTTOM) as f64
            - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) as f64
    };

    let mut canvas = Canvas::new();
    const TICKS: usize = 5;
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        canvas.line((px(xv), MARGIN_TOP as f64), (px(xv), py(y0)), GRID);
        canvas.line((px(x0), py(yv)), ((WIDTH - MARGIN_RIGHT) as f64, py(yv)), GRID);
        let xl = fmt_tick(xv);
        canvas.text(
            px(xv) as i64 - 4 * xl.len() as i64 / 2,
            (HEIGHT - MARGIN_BOTTOM + 8) as i64,
            &xl,
            AXIS,
        );
        let yl = fmt_tick(yv);
        canvas.text(MARGIN_LEFT as i64 - 8 * yl.len() as i64 - 6, py(yv) as i64 - 5, &yl, AXIS);
    }
    canvas.line((px(x0), py(y0)), (px(x1), py(y0)), AXIS);
    canvas.line((px(x0), py(y0)), (px(x0), py(y1)), AXIS);
    for pair in points.windows(2) {
        canvas.line((px(pair[0].0), py(pair[0].1)), (px(pair[1].0), py(pair[1].1)), SERIES);
    }
    canvas.save(path)
}

/// Parses a numeric field, reporting the 1-based source line on failure.
fn field(path: &Path, lineno: usize, raw: &str, name: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| {
        Error::parse(path, format!("line {lineno}: bad {name} value {raw:?}"))
    })
}

/// Reads a loss log and returns `(iteration, total)` points.
pub fn read_losses_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let lineno = i + 1;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::parse(
                path,
                format!("line {lineno}: expected 7 fields, got {}", cols.len()),
            ));
        }
        let iter = field(path, lineno, cols[0], "iter")?;
        for (raw, name) in cols[1..6].iter().zip(["seg_semi", "rect", "lat_semi", "lat_u", "lat_l"])
        {
            field(path, lineno, raw, name)?;
        }
        let total = field(path, lineno, cols[6], "total")?;
        out.push((iter, total));
    }
    Ok(out)
}

/// Reads a per-case metrics log and returns `(iteration, mean dice)` points.
pub fn read_dice_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut grouped: Vec<(f64, f64, usize)> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let lineno = i + 1;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::parse(
                path,
                format!("line {lineno}: expected 6 fields, got {}", cols.len()),
            ));
        }
        let iter = field(path, lineno, cols[0], "iter")?;
        let dice = field(path, lineno, cols[2], "dice")?;
        for (raw, name) in cols[3..].iter().zip(["jaccard", "hd95", "asd"]) {
            field(path, lineno, raw, name)?;
        }
        match grouped.last_mut() {
            Some((it, sum, n)) if *it == iter => {
                *sum += dice;
                *n += 1;
            }
            _ => grouped.push((iter, dice, 1)),
        }
    }
    Ok(grouped.into_iter().map(|(it, sum, n)| (it, sum / n as f64)).collect())
}
