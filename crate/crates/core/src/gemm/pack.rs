use crate::error::{Error, Result};
use crate::io::{packed_len, Payload, TensorFile};

/// Signed 4-bit codes in `[-7, 7]`, two per byte. Each row takes `⌈cols/2⌉`
/// bytes; the even column sits in the low nibble and an odd trailing column
/// is padded with a zero code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedInt4Matrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

#[inline]
fn sign_extend(nibble: u8) -> i8 {
    ((nibble << 4) as i8) >> 4
}

impl PackedInt4Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols.div_ceil(2)],
        }
    }

    /// Packs row-major codes; any code outside `[-7, 7]` is an error.
    pub fn pack(rows: usize, cols: usize, codes: &[i8]) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(Error::shape(
                "pack_int4",
                format!("{} codes for {rows}×{cols}", codes.len()),
            ));
        }
        if let Some(&bad) = codes.iter().find(|c| !(-7..=7).contains(*c)) {
            return Err(Error::InvalidArgument(format!(
                "code {bad} outside the 4-bit range [-7, 7]"
            )));
        }
        let stride = cols.div_ceil(2);
        let mut data = vec![0u8; rows * stride];
        for (dst, src) in data
            .chunks_exact_mut(stride.max(1))
            .zip(codes.chunks_exact(cols.max(1)))
        {
            for (b, pair) in dst.iter_mut().zip(src.chunks(2)) {
                let lo = pair[0] as u8 & 0x0f;
                let hi = pair.get(1).map_or(0, |&c| c as u8 & 0x0f);
                *b = lo | hi << 4;
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Validates raw packed bytes: exact length, no `-8` nibble, zero padding.
    pub fn from_bytes(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        let want = rows
            .checked_mul(cols.div_ceil(2))
            .ok_or_else(|| Error::format("packed int4", "size overflows"))?;
        if data.len() != want {
            return Err(Error::format(
                "packed int4",
                format!("{} bytes for {rows}×{cols}, need {want}", data.len()),
            ));
        }
        let stride = cols.div_ceil(2);
        for (r, row) in data.chunks_exact(stride.max(1)).enumerate().take(rows) {
            for (i, &b) in row.iter().enumerate() {
                if b & 0x0f == 0x08 || b >> 4 == 0x08 {
                    return Err(Error::format(
                        "packed int4",
                        format!("code -8 at row {r} byte {i}"),
                    ));
                }
            }
            if cols % 2 == 1 && row[stride - 1] >> 4 != 0 {
                return Err(Error::format(
                    "packed int4",
                    format!("non-zero padding in row {r}"),
                ));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_file(file: TensorFile) -> Result<Self> {
        let [rows, cols] = file.shape[..] else {
            return Err(Error::format(
                "packed int4",
                format!("expected a matrix, got shape {:?}", file.shape),
            ));
        };
        debug_assert_eq!(packed_len(&file.shape), Some(rows * cols.div_ceil(2)));
        match file.payload {
            Payload::PackedU4(bytes) => Self::from_bytes(rows, cols, bytes),
            _ => Err(Error::format("packed int4", "payload is not packed 4-bit")),
        }
    }

    pub fn to_file(&self) -> TensorFile {
        TensorFile {
            shape: vec![self.rows, self.cols],
            payload: Payload::PackedU4(self.data.clone()),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> i8 {
        let b = self.data[r * self.cols.div_ceil(2) + c / 2];
        sign_extend(if c % 2 == 0 { b & 0x0f } else { b >> 4 })
    }

    /// Row-major codes, sign-extended.
    pub fn unpack(&self) -> Vec<i8> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        let stride = self.cols.div_ceil(2);
        for row in self.data.chunks_exact(stride.max(1)).take(self.rows) {
            for c in 0..self.cols {
                let b = row[c / 2];
                out.push(sign_extend(if c % 2 == 0 { b & 0x0f } else { b >> 4 }));
            }
        }
        out
    }

    pub(crate) fn decode_i16(&self) -> Vec<i16> {
        let mut out = vec![0i16; self.rows * self.cols];
        let stride = self.cols.div_ceil(2);
        if self.cols == 0 {
            return out;
        }
        for (dst, row) in out
            .chunks_exact_mut(self.cols)
            .zip(self.data.chunks_exact(stride))
        {
            let mut pairs = dst.chunks_exact_mut(2);
            for (d, &b) in (&mut pairs).zip(row) {
                d[0] = sign_extend(b & 0x0f) as i16;
                d[1] = sign_extend(b >> 4) as i16;
            }
            if let [last] = pairs.into_remainder() {
                *last = sign_extend(row[stride - 1] & 0x0f) as i16;
            }
        }
        out
    }
}

/// Outlier channels of one activation: sorted indices, their 8-bit codes as
/// a dense `rows×count` matrix, and one dequantization scale each.
#[derive(Clone, Debug, PartialEq)]
pub struct OutlierBuffer {
    rows: usize,
    channel_indices: Vec<usize>,
    columns: Vec<i8>,
    scales: Vec<f64>,
}

impl OutlierBuffer {
    pub fn new(
        rows: usize,
        channel_indices: Vec<usize>,
        columns: Vec<i8>,
        scales: Vec<f64>,
    ) -> Result<Self> {
        if channel_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "outlier channels must be strictly increasing".into(),
            ));
        }
        if columns.len() != rows * channel_indices.len() || scales.len() != channel_indices.len() {
            return Err(Error::shape(
                "outlier buffer",
                format!(
                    "{} codes and {} scales for {rows} rows × {} channels",
                    columns.len(),
                    scales.len(),
                    channel_indices.len()
                ),
            ));
        }
        if columns.contains(&i8::MIN) {
            return Err(Error::InvalidArgument(
                "outlier code -128 is outside the symmetric range".into(),
            ));
        }
        if let Some(s) = scales.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("outlier scale {s}")));
        }
        Ok(Self {
            rows,
            channel_indices,
            columns,
            scales,
        })
    }

    pub fn empty(rows: usize) -> Self {
        Self {
            rows,
            channel_indices: Vec::new(),
            columns: Vec::new(),
            scales: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.channel_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channel_indices.is_empty()
    }

    pub fn channel_indices(&self) -> &[usize] {
        &self.channel_indices
    }

    pub fn columns(&self) -> &[i8] {
        &self.columns
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }
}
