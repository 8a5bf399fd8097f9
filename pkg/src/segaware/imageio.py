"""Binary PPM (P6) and PGM (P5) files with maxval 255."""

import numpy as np


class ImageFormatError(ValueError):
    pass


def _quantize(a):
    a = np.asarray(a, dtype=np.float64)
    if np.any(~np.isfinite(a)):
        raise ValueError("image contains non-finite values")
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image):
    """``image`` is H x W x 3 in [0, 1]; values are rounded to 1/255 steps."""
    img = _quantize(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs H x W x 3, got {img.shape}")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def write_pgm(path, labels):
    lab = np.asarray(labels)
    if lab.ndim != 2 or lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
        raise ValueError("PGM needs a 2-D map with values in [0, 255]")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (lab.shape[1], lab.shape[0]))
        fh.write(lab.astype(np.uint8).tobytes())


def _parse(path, magic):
    with open(path, "rb") as fh:
        blob = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated header")
        fields.append(blob[start:pos])
    if fields[0] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} file")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad header") from exc
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported")
    return blob[pos + 1:], h, w


def read_ppm(path):
    data, h, w = _parse(path, b"P6")
    if len(data) < h * w * 3:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(data, np.uint8, h * w * 3).reshape(h, w, 3) / 255.0


def read_pgm(path):
    data, h, w = _parse(path, b"P5")
    if len(data) < h * w:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(data, np.uint8, h * w).reshape(h, w).astype(np.int64)
