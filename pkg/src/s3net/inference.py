import torch
import torch.nn.functional as F

from .data import RelightSample, assemble_input


def relight(model, src_img, src_depth, guide_img, guide_depth):
    """Relight `src_img` to the guide's illumination; any H, W (padded internally)."""
    sample = RelightSample(src_img, src_depth, guide_img, guide_depth, target_img=src_img)
    x = assemble_input(sample)[None]
    h, w = x.shape[-2:]
    d = model.cfg.divisor
    pad_h, pad_w = (-h) % d, (-w) % d
    if pad_h or pad_w:
        mode = "reflect" if pad_h < h and pad_w < w else "replicate"
        x = F.pad(x, (0, pad_w, 0, pad_h), mode=mode)
    model.eval()
    with torch.no_grad():
        out = model(x)
    return out[0, :, :h, :w]
