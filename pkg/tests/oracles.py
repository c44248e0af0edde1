"""Independent brute-force references used by the tests."""
import numpy as np


def set_iou(pred, gt, cls):
    """IoU of one class from explicit pixel-coordinate sets."""
    p = {(y, x) for (y, x), v in np.ndenumerate(pred) if v == cls}
    g = {(y, x) for (y, x), v in np.ndenumerate(gt) if v == cls}
    union = p | g
    if not union:
        return None
    return len(p & g) / len(union)


def set_miou(pairs, k):
    """Dataset mIoU from pixel sets keyed by (image, y, x)."""
    ious = []
    for c in range(k):
        p, g = set(), set()
        for i, (pred, gt) in enumerate(pairs):
            p |= {(i, y, x) for (y, x), v in np.ndenumerate(pred) if v == c}
            g |= {(i, y, x) for (y, x), v in np.ndenumerate(gt) if v == c}
        if p | g:
            ious.append(len(p & g) / len(p | g))
        else:
            ious.append(None)
    defined = [v for v in ious if v is not None]
    return ious, (sum(defined) / len(defined) if defined else None)


def four_neighbour_edges(parts):
    h, w = parts.shape
    out = np.zeros((h, w), np.uint8)
    for y in range(h):
        for x in range(w):
            if parts[y, x] == 0:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and parts[yy, xx] != parts[y, x]:
                    out[y, x] = 1
    return out


def flood_components(mask):
    """4-connected components as lists of pixels, by breadth-first search."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not seen[y, x]:
                stack, comp = [(y, x)], []
                seen[y, x] = True
                while stack:
                    cy, cx = stack.pop()
                    comp.append((cy, cx))
                    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
                comps.append(comp)
    return comps
