"""Mask overlays written as binary portable pixmaps (P6)."""
import numpy as np

TP = (0, 255, 0)
FP = (0, 0, 255)
FN = (255, 0, 0)


def overlay(image, pred, truth=None):
    """Grayscale slice with lesion colours: green TP, blue FP, red FN.

    Without ``truth`` every predicted pixel is drawn green.
    """
    g = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    rgb = np.repeat((g * 255).round().astype(np.uint8)[..., None], 3, axis=-1)
    pred = np.asarray(pred).astype(bool)
    if truth is None:
        rgb[pred] = TP
        return rgb
    truth = np.asarray(truth).astype(bool)
    rgb[pred & truth] = TP
    rgb[pred & ~truth] = FP
    rgb[~pred & truth] = FN
    return rgb


def write_ppm(path, rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic, size, maxval, rest = data.split(b"\n", 3)
    w, h = size.split()
    if magic != b"P6" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit P6 pixmap")
    return np.frombuffer(rest, dtype=np.uint8).reshape(int(h), int(w), 3)
