"""Fixed-width CGGTTS-style subset used for the clock-difference files.

Layout of a data line (0-based columns, right aligned, space separated)::

    0-2    SAT     satellite id, e.g. E07
    4-8    MJD     day number
    10-15  STTIME  track start, hhmmss
    17-20  TRKL    track length, s
    22-24  ELV     elevation, 0.1 deg
    26-36  REFSV   clock minus satellite, 0.1 ns
    38-48  REFSYS  clock minus system time, 0.1 ns

A file is a header block whose first line starts with ``CGGTTS``, then the
column title line, then one record per line. Header lines are kept verbatim.
"""
from __future__ import annotations

from dataclasses import dataclass, field

MIN_TRACK = 780  # s

TITLE = "SAT MJD   STTIME TRKL ELV       REFSV      REFSYS"
DEFAULT_HEADER = (
    "CGGTTS     GENERIC DATA FORMAT VERSION = 2E (SUBSET)",
    "LAB = UNKNOWN",
    "UNITS: STTIME hhmmss, TRKL s, ELV 0.1 deg, REFSV/REFSYS 0.1 ns",
)
FIELDS = (  # name, start, end (exclusive)
    ("sat_id", 0, 3),
    ("mjd", 4, 9),
    ("start_time", 10, 16),
    ("track_length", 17, 21),
    ("elevation", 22, 25),
    ("refsv", 26, 37),
    ("refsys", 38, 49),
)
LINE_WIDTH = FIELDS[-1][2]


class CggttsError(ValueError):
    def __init__(self, message, line=None, column=None):
        self.line, self.column = line, column
        where = f"line {line}" + (f", column {column}" if column is not None else "") if line else ""
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class CggttsRecord:
    sat_id: str
    mjd: int
    start_time: int  # s of day
    track_length: int  # s
    refsv: int  # 0.1 ns
    refsys: int  # 0.1 ns
    elevation: int  # 0.1 deg

    def __post_init__(self):
        if len(self.sat_id) != 3 or not self.sat_id.isalnum():
            raise ValueError(f"sat_id must be 3 alphanumerics, got {self.sat_id!r}")
        if not 0 <= self.mjd <= 99999:
            raise ValueError("mjd out of range")
        if not 0 <= self.start_time < 86400:
            raise ValueError("start_time must be within the day")
        if not MIN_TRACK <= self.track_length <= 9999:
            raise ValueError(f"track_length must be >= {MIN_TRACK} s")
        if not 0 <= self.elevation <= 900:
            raise ValueError("elevation must be 0..900 (0.1 deg)")
        for name in ("refsv", "refsys"):
            if not -(10**10) < getattr(self, name) < 10**11:
                raise ValueError(f"{name} does not fit its field")

    def encode(self) -> str:
        h, rem = divmod(self.start_time, 3600)
        m, s = divmod(rem, 60)
        return (f"{self.sat_id:>3} {self.mjd:5d} {h:02d}{m:02d}{s:02d} {self.track_length:4d} "
                f"{self.elevation:3d} {self.refsv:11d} {self.refsys:11d}")


@dataclass
class CggttsFile:
    header: list = field(default_factory=lambda: list(DEFAULT_HEADER))
    records: list = field(default_factory=list)


def encode_cggtts_subset(records, header=None) -> bytes:
    header = list(DEFAULT_HEADER if header is None else header)
    if not header or not header[0].startswith("CGGTTS"):
        raise ValueError("first header line must start with 'CGGTTS'")
    lines = header + [TITLE] + [r.encode() for r in records]
    return ("\n".join(lines) + "\n").encode("ascii")


def _field(line, lineno, name, start, end):
    text = line[start:end]
    if name == "sat_id":
        return text.strip()
    try:
        if name == "start_time":
            if not text.isdigit():
                raise ValueError
            h, m, s = int(text[:2]), int(text[2:4]), int(text[4:])
            if h > 23 or m > 59 or s > 59:
                raise ValueError
            return 3600 * h + 60 * m + s
        return int(text)
    except ValueError:
        raise CggttsError(f"bad {name} field {text!r}", lineno, start + 1) from None


def parse_cggtts_subset(data: bytes) -> CggttsFile:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise CggttsError(f"non-ASCII byte at offset {exc.start}") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith("CGGTTS"):
        raise CggttsError("missing CGGTTS header", 1, 1)
    try:
        title = lines.index(TITLE)
    except ValueError:
        raise CggttsError("truncated file: no column title line") from None
    records = []
    for i, line in enumerate(lines[title + 1:], start=title + 2):
        if len(line) != LINE_WIDTH:
            raise CggttsError(f"record must be {LINE_WIDTH} characters, got {len(line)}",
                              i, min(len(line), LINE_WIDTH) + 1)
        for _, start, end in FIELDS[:-1]:
            if line[end] != " ":
                raise CggttsError("expected a blank separator", i, end + 1)
        values = {name: _field(line, i, name, a, b) for name, a, b in FIELDS}
        try:
            records.append(CggttsRecord(**values))
        except ValueError as exc:
            raise CggttsError(str(exc), i) from None
    return CggttsFile(lines[:title], records)
