"""Binary Netpbm readers/writers (P4 bitmaps, P5 greymaps, P6 pixmaps)."""

import numpy as np


def write_ppm(path, rgb):
    """``rgb``: (H, W, 3) floats in [0, 1] or uint8."""
    arr = _to_u8(rgb)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def write_pgm(path, grey):
    arr = _to_u8(grey)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def write_pbm(path, mask):
    """P4: 1 = black = foreground, rows padded to whole bytes."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P4\n{w} {h}\n".encode())
        fh.write(np.packbits(mask, axis=1).tobytes())


def _to_u8(x):
    x = np.asarray(x)
    if x.dtype == np.uint8:
        return x
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def _read_header(buf, fields):
    """Parse ``fields`` whitespace-separated header tokens, skipping comments."""
    vals, pos = [], 0
    while len(vals) < fields:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while buf[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        vals.append(buf[start:pos])
    return vals, pos + 1


def read_pnm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    magic = buf[:2]
    if magic == b"P4":
        (m, w, h), off = _read_header(buf, 3)
        w, h = int(w), int(h)
        rowbytes = (w + 7) // 8
        bits = np.frombuffer(buf, np.uint8, count=rowbytes * h, offset=off).reshape(h, rowbytes)
        return np.unpackbits(bits, axis=1)[:, :w].astype(bool)
    if magic in (b"P5", b"P6"):
        (m, w, h, maxval), off = _read_header(buf, 4)
        w, h = int(w), int(h)
        if int(maxval) != 255:
            raise ValueError(f"{path}: only 8-bit maps are supported")
        ch = 3 if magic == b"P6" else 1
        arr = np.frombuffer(buf, np.uint8, count=w * h * ch, offset=off)
        return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)
    raise ValueError(f"{path}: unsupported netpbm magic {magic!r}")
