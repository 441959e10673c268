//! Telemetry records, the redundant flash image and downlink arithmetic.
//!
//! Record layout (32 bytes, little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | `time_ms`                               |
//! | 4      | 2    | `scan_id`                               |
//! | 6      | 1    | `step` (bits 0-6) and `pair_sel` (bit 7)|
//! | 7      | 2    | `lc_signal_mv`                          |
//! | 9      | 2    | `lc_idler_mv`                           |
//! | 11     | 4    | `singles_1`                             |
//! | 15     | 4    | `singles_2`                             |
//! | 19     | 3    | `coinc_raw` (u24)                       |
//! | 22     | 2    | `temp_centi_c` (i16)                    |
//! | 24     | 2    | `laser_power_10uw`                      |
//! | 26     | 2    | `bias_1_decivolt`                       |
//! | 28     | 2    | `bias_2_decivolt`                       |
//! | 30     | 1    | `flags`                                 |
//! | 31     | 1    | CRC-8 (poly 0x07, init 0x00) of 0..31   |

use std::path::Path;

use thiserror::Error;

pub const RECORD_LEN: usize = 32;
pub const SECTOR_LEN: usize = 1 << 20;
pub const FLASH_LEN: usize = 2 * SECTOR_LEN;
pub const RECORDS_PER_SECTOR: usize = SECTOR_LEN / RECORD_LEN;

/// One record per 125 ms of operation.
pub const RECORD_PERIOD_MS: u32 = 125;
pub const RECORD_RATE_HZ: f64 = 8.0;

pub const DOWNLINK_BYTES_PER_S: f64 = 1250.0;

pub const MAX_STEP: u8 = 0x7f;
pub const MAX_COINC: u32 = 0x00ff_ffff;

const ERASED: u8 = 0xff;

pub mod flags {
    pub const LASER_ON: u8 = 1 << 0;
    pub const HEATER_ON: u8 = 1 << 1;
    /// Counts in this record were integrated during a scan dwell.
    pub const COLLECTING: u8 = 1 << 2;
    pub const LC_SETTLED: u8 = 1 << 3;
    /// The scan named by `scan_id` completed and was committed.
    pub const SCAN_COMMIT: u8 = 1 << 4;
    pub const FAULT: u8 = 1 << 5;
    /// Written after the ring buffer wrapped at least once.
    pub const WRAPPED: u8 = 1 << 6;
    pub const APD_FAULT: u8 = 1 << 7;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TelemetryError {
    #[error("record must be {RECORD_LEN} bytes, got {0}")]
    Length(usize),
    #[error("crc mismatch: stored {stored:#04x}, computed {computed:#04x}")]
    Crc { stored: u8, computed: u8 },
    #[error("field {field} out of range: {value}")]
    FieldRange { field: &'static str, value: u64 },
    #[error("flash image must be {FLASH_LEN} bytes, got {0}")]
    ImageLength(usize),
    #[error("flash io: {0}")]
    Io(String),
}

const CRC8_TABLE: [u8; 256] = build_crc8_table(0x07);

const fn build_crc8_table(poly: u8) -> [u8; 256] {
    let mut table = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x80 != 0 {
                (crc << 1) ^ poly
            } else {
                crc << 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

pub fn crc8(bytes: &[u8]) -> u8 {
    bytes
        .iter()
        .fold(0u8, |crc, &b| CRC8_TABLE[(crc ^ b) as usize])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TelemetryRecord {
    pub time_ms: u32,
    pub scan_id: u16,
    pub step: u8,
    /// 0 for detectors 1&4, 1 for detectors 2&3.
    pub pair_sel: u8,
    pub lc_signal_mv: u16,
    pub lc_idler_mv: u16,
    pub singles_1: u32,
    pub singles_2: u32,
    pub coinc_raw: u32,
    pub temp_centi_c: i16,
    pub laser_power_10uw: u16,
    pub bias_1_decivolt: u16,
    pub bias_2_decivolt: u16,
    pub flags: u8,
}

impl TelemetryRecord {
    pub fn has_flag(&self, flag: u8) -> bool {
        self.flags & flag != 0
    }

    pub fn encode(&self) -> Result<[u8; RECORD_LEN], TelemetryError> {
        if self.step > MAX_STEP {
            return Err(TelemetryError::FieldRange {
                field: "step",
                value: self.step.into(),
            });
        }
        if self.pair_sel > 1 {
            return Err(TelemetryError::FieldRange {
                field: "pair_sel",
                value: self.pair_sel.into(),
            });
        }
        if self.coinc_raw > MAX_COINC {
            return Err(TelemetryError::FieldRange {
                field: "coinc_raw",
                value: self.coinc_raw.into(),
            });
        }
        let mut b = [0u8; RECORD_LEN];
        b[0..4].copy_from_slice(&self.time_ms.to_le_bytes());
        b[4..6].copy_from_slice(&self.scan_id.to_le_bytes());
        b[6] = self.step | (self.pair_sel << 7);
        b[7..9].copy_from_slice(&self.lc_signal_mv.to_le_bytes());
        b[9..11].copy_from_slice(&self.lc_idler_mv.to_le_bytes());
        b[11..15].copy_from_slice(&self.singles_1.to_le_bytes());
        b[15..19].copy_from_slice(&self.singles_2.to_le_bytes());
        b[19..22].copy_from_slice(&self.coinc_raw.to_le_bytes()[..3]);
        b[22..24].copy_from_slice(&self.temp_centi_c.to_le_bytes());
        b[24..26].copy_from_slice(&self.laser_power_10uw.to_le_bytes());
        b[26..28].copy_from_slice(&self.bias_1_decivolt.to_le_bytes());
        b[28..30].copy_from_slice(&self.bias_2_decivolt.to_le_bytes());
        b[30] = self.flags;
        b[31] = crc8(&b[..31]);
        Ok(b)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TelemetryError> {
        if bytes.len() != RECORD_LEN {
            return Err(TelemetryError::Length(bytes.len()));
        }
        let computed = crc8(&bytes[..31]);
        if computed != bytes[31] {
            return Err(TelemetryError::Crc {
                stored: bytes[31],
                computed,
            });
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at =
            |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        Ok(Self {
            time_ms: u32_at(0),
            scan_id: u16_at(4),
            step: bytes[6] & MAX_STEP,
            pair_sel: bytes[6] >> 7,
            lc_signal_mv: u16_at(7),
            lc_idler_mv: u16_at(9),
            singles_1: u32_at(11),
            singles_2: u32_at(15),
            coinc_raw: u32::from_le_bytes([bytes[19], bytes[20], bytes[21], 0]),
            temp_centi_c: i16::from_le_bytes([bytes[22], bytes[23]]),
            laser_power_10uw: u16_at(24),
            bias_1_decivolt: u16_at(26),
            bias_2_decivolt: u16_at(28),
            flags: bytes[30],
        })
    }
}

/// Outcome of reading or repairing the two flash sectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SectorReport {
    pub valid: usize,
    pub recovered_from_a: usize,
    pub recovered_from_b: usize,
    pub lost: usize,
}

/// Two 1 MiB sectors holding identical copies of a record ring buffer.
#[derive(Clone, PartialEq, Eq)]
pub struct FlashImage {
    sector_a: Vec<u8>,
    sector_b: Vec<u8>,
    cursor: usize,
    wrapped: bool,
    records_written: u64,
}

impl std::fmt::Debug for FlashImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlashImage")
            .field("cursor", &self.cursor)
            .field("wrapped", &self.wrapped)
            .field("records_written", &self.records_written)
            .finish_non_exhaustive()
    }
}

impl Default for FlashImage {
    fn default() -> Self {
        Self::erased()
    }
}

impl FlashImage {
    pub fn erased() -> Self {
        Self {
            sector_a: vec![ERASED; SECTOR_LEN],
            sector_b: vec![ERASED; SECTOR_LEN],
            cursor: 0,
            wrapped: false,
            records_written: 0,
        }
    }

    pub fn sector_a(&self) -> &[u8] {
        &self.sector_a
    }

    pub fn sector_b(&self) -> &[u8] {
        &self.sector_b
    }

    /// Mutable access to one sector, for fault injection.
    pub fn sector_a_mut(&mut self) -> &mut [u8] {
        &mut self.sector_a
    }

    pub fn sector_b_mut(&mut self) -> &mut [u8] {
        &mut self.sector_b
    }

    /// Slot index of the next write.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn has_wrapped(&self) -> bool {
        self.wrapped
    }

    pub fn records_written(&self) -> u64 {
        self.records_written
    }

    /// Bytes committed since the image was erased, ignoring wrap.
    pub fn bytes_written(&self) -> u64 {
        self.records_written * RECORD_LEN as u64
    }

    /// Appends records to both sectors. When the sector is full the cursor
    /// wraps to slot 0 and every later record carries [`flags::WRAPPED`].
    pub fn write_redundant(&mut self, records: &[TelemetryRecord]) -> Result<(), TelemetryError> {
        for record in records {
            let mut record = *record;
            if self.wrapped {
                record.flags |= flags::WRAPPED;
            }
            let bytes = record.encode()?;
            let at = self.cursor * RECORD_LEN;
            self.sector_a[at..at + RECORD_LEN].copy_from_slice(&bytes);
            self.sector_b[at..at + RECORD_LEN].copy_from_slice(&bytes);
            self.records_written += 1;
            self.cursor += 1;
            if self.cursor == RECORDS_PER_SECTOR {
                self.cursor = 0;
                self.wrapped = true;
            }
        }
        Ok(())
    }

    fn slot(sector: &[u8], i: usize) -> &[u8] {
        &sector[i * RECORD_LEN..(i + 1) * RECORD_LEN]
    }

    fn is_erased(bytes: &[u8]) -> bool {
        bytes.iter().all(|&b| b == ERASED)
    }

    /// Decodes every written slot, taking whichever copy passes its CRC.
    /// Records come back ordered by `time_ms`.
    pub fn read_records(&self) -> (Vec<TelemetryRecord>, SectorReport) {
        let mut report = SectorReport::default();
        let mut out = Vec::new();
        for i in 0..RECORDS_PER_SECTOR {
            let a = Self::slot(&self.sector_a, i);
            let b = Self::slot(&self.sector_b, i);
            if Self::is_erased(a) && Self::is_erased(b) {
                continue;
            }
            match (TelemetryRecord::decode(a), TelemetryRecord::decode(b)) {
                (Ok(r), Ok(_)) => {
                    report.valid += 1;
                    out.push(r);
                }
                (Ok(r), Err(_)) => {
                    report.recovered_from_a += 1;
                    out.push(r);
                }
                (Err(_), Ok(r)) => {
                    report.recovered_from_b += 1;
                    out.push(r);
                }
                (Err(_), Err(_)) => report.lost += 1,
            }
        }
        out.sort_by_key(|r| r.time_ms);
        (out, report)
    }

    /// Overwrites any slot whose copy fails its CRC with the good copy from
    /// the other sector.
    pub fn repair(&mut self) -> SectorReport {
        let mut report = SectorReport::default();
        for i in 0..RECORDS_PER_SECTOR {
            let range = i * RECORD_LEN..(i + 1) * RECORD_LEN;
            let a = &self.sector_a[range.clone()];
            let b = &self.sector_b[range.clone()];
            if a == b {
                if !Self::is_erased(a) {
                    report.valid += 1;
                }
                continue;
            }
            match (
                TelemetryRecord::decode(a).is_ok(),
                TelemetryRecord::decode(b).is_ok(),
            ) {
                (true, false) => {
                    let good = a.to_vec();
                    self.sector_b[range].copy_from_slice(&good);
                    report.recovered_from_a += 1;
                }
                (false, true) => {
                    let good = b.to_vec();
                    self.sector_a[range].copy_from_slice(&good);
                    report.recovered_from_b += 1;
                }
                _ => report.lost += 1,
            }
        }
        report
    }

    /// Raw 2 MiB image: sector A at offset 0, sector B at 1 MiB.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FLASH_LEN);
        out.extend_from_slice(&self.sector_a);
        out.extend_from_slice(&self.sector_b);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TelemetryError> {
        if bytes.len() != FLASH_LEN {
            return Err(TelemetryError::ImageLength(bytes.len()));
        }
        let mut image = Self {
            sector_a: bytes[..SECTOR_LEN].to_vec(),
            sector_b: bytes[SECTOR_LEN..].to_vec(),
            cursor: 0,
            wrapped: false,
            records_written: 0,
        };
        // Resume after the newest record.
        let mut newest: Option<(u32, usize)> = None;
        let mut used = 0u64;
        for i in 0..RECORDS_PER_SECTOR {
            let a = Self::slot(&image.sector_a, i);
            let b = Self::slot(&image.sector_b, i);
            let record = TelemetryRecord::decode(a).or_else(|_| TelemetryRecord::decode(b));
            if let Ok(r) = record {
                used += 1;
                if newest.is_none_or(|(t, _)| r.time_ms >= t) {
                    newest = Some((r.time_ms, i));
                }
                if r.has_flag(flags::WRAPPED) {
                    image.wrapped = true;
                }
            }
        }
        image.records_written = used;
        image.cursor = newest.map_or(0, |(_, i)| (i + 1) % RECORDS_PER_SECTOR);
        Ok(image)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TelemetryError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| TelemetryError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TelemetryError> {
        let bytes = std::fs::read(path).map_err(|e| TelemetryError::Io(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

/// Bytes produced by `duration_s` of continuous logging at `record_rate_hz`.
pub fn session_volume(duration_s: f64, record_rate_hz: f64) -> u64 {
    (duration_s * record_rate_hz * RECORD_LEN as f64).floor() as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub rate_bytes_per_s: f64,
    pub volume_bytes: u64,
}

impl LinkBudget {
    pub fn uhf(volume_bytes: u64) -> Self {
        Self {
            rate_bytes_per_s: DOWNLINK_BYTES_PER_S,
            volume_bytes,
        }
    }

    pub fn downlink_time(&self) -> f64 {
        self.volume_bytes as f64 / self.rate_bytes_per_s
    }
}
