"""Frame-batched GEMM kernel shared by the dense and structured-sparse convolutions.

Every retained input frame contributes a (rows, K_t, C_out) partial-sum block:
its spatial patches times the weights of all temporal taps.  Output frames are
then assembled as ``bias + sum over taps (ascending)`` of those blocks.

How the blocks are produced depends on what is pruned:

* nothing below frame level: one GEMM over the patches of all retained frames;
* channels: a batched GEMM where each frame only gathers its retained channels
  (padded to the largest per-frame count);
* features: pruned positions are zeroed and output rows whose receptive field
  holds no retained feature are left out of the GEMM.

With an all-true plan the sparse path runs the dense code and agrees bit-for-bit.
"""

from __future__ import annotations

import numpy as np

# Compaction and row skipping only pay for their gathers below these
# retained fractions (measured on the toy layer sizes); above them the pruned
# elements are zeroed and the dense GEMM runs.
CHANNEL_COMPACT_CUTOFF = 0.5
ROW_SKIP_CUTOFF = 0.5


def output_dims(dims, kernel, stride, padding):
    return tuple((d + 2 * p - k) // s + 1 for d, k, s, p in zip(dims, kernel, stride, padding))


def tap_matrix(weights: np.ndarray) -> np.ndarray:
    """Re-lay (C_out, C_in, K_t, K_h, K_w) weights as (K_h*K_w*C_in, K_t, C_out)."""
    c_out, c_in, k_t, k_h, k_w = weights.shape
    return np.ascontiguousarray(weights.transpose(3, 4, 1, 2, 0)).reshape(k_h * k_w * c_in, k_t, c_out)


def _patches(frames: np.ndarray, kernel_hw, stride_hw, padding_hw, out_hw, scale=None) -> np.ndarray:
    """Channels-last (F, H, W, C) -> (F, rows, K_h*K_w*C) patch matrices.

    ``scale`` (broadcastable to ``frames``) is multiplied in while padding.
    """
    (k_h, k_w), (s_h, s_w), (p_h, p_w) = kernel_hw, stride_hw, padding_hw
    h_o, w_o = out_hw
    f, h, w, c = frames.shape
    if p_h or p_w or scale is not None:
        padded = np.zeros((f, h + 2 * p_h, w + 2 * p_w, c), dtype=frames.dtype)
        inner = padded[:, p_h:p_h + h, p_w:p_w + w]
        if scale is None:
            inner[...] = frames
        else:
            np.multiply(frames, scale, out=inner)
    else:
        padded = frames
    cols = np.empty((f, h_o, w_o, k_h, k_w, c), dtype=frames.dtype)
    for kh in range(k_h):
        for kw in range(k_w):
            cols[:, :, :, kh, kw] = padded[:, kh:kh + s_h * (h_o - 1) + 1:s_h, kw:kw + s_w * (w_o - 1) + 1:s_w]
    return cols.reshape(f, h_o * w_o, k_h * k_w * c)


def _blocks_dense(frames, taps, kernel_hw, stride_hw, padding_hw, out_hw, scale=None):
    cols = _patches(frames, kernel_hw, stride_hw, padding_hw, out_hw, scale)
    f, rows, kdim = cols.shape
    k_t, c_out = taps.shape[1:]
    return (cols.reshape(f * rows, kdim) @ taps.reshape(kdim, k_t * c_out)).reshape(f, rows, k_t, c_out)


def _blocks_channels(frames, keep, taps, kernel_hw, stride_hw, padding_hw, out_hw, scale=None):
    """``keep`` is bool[F, C]; each frame multiplies only its retained channels.

    ``scale`` is an optional (F, H, W, 1) feature mask.
    """
    f, c = keep.shape
    counts = keep.sum(axis=1)
    kmax = int(counts.max())
    # stable sort puts retained channels first, in index order
    order = np.argsort(~keep, axis=1, kind="stable")[:, :kmax]
    gathered = np.take_along_axis(frames, order[:, None, None, :], axis=3)
    if (counts < kmax).any():
        pad_mask = (np.arange(kmax)[None, :] < counts[:, None])[:, None, None, :]
        scale = pad_mask if scale is None else scale & pad_mask
    cols = _patches(gathered, kernel_hw, stride_hw, padding_hw, out_hw, scale)
    block = kernel_hw[0] * kernel_hw[1]
    k_t, c_out = taps.shape[1:]
    rows_idx = (np.arange(block)[None, :, None] * c + order[:, None, :]).reshape(f, block * kmax)
    w = np.take(taps.reshape(block * c, k_t * c_out), rows_idx, axis=0)
    return np.matmul(cols, w).reshape(f, cols.shape[1], k_t, c_out)


def _live_rows(feature_keep, kernel_hw, stride_hw, padding_hw, out_hw) -> np.ndarray:
    """bool[F, rows]: output rows whose receptive field holds a retained feature."""
    cover = _patches(feature_keep[..., None].astype(np.uint8), kernel_hw, stride_hw, padding_hw, out_hw)
    return cover.any(axis=2)


def _blocks_rows(frames, live, taps, kernel_hw, stride_hw, padding_hw, out_hw, scale=None):
    """Dense blocks computed only on the ``live`` output rows; the rest are zero."""
    cols = _patches(frames, kernel_hw, stride_hw, padding_hw, out_hw, scale)
    f, rows, kdim = cols.shape
    k_t, c_out = taps.shape[1:]
    blocks = np.zeros((f * rows, k_t * c_out), dtype=np.result_type(cols.dtype, taps.dtype))
    sel = np.flatnonzero(live.reshape(-1))
    blocks[sel] = cols.reshape(f * rows, kdim)[sel] @ taps.reshape(kdim, k_t * c_out)
    return blocks.reshape(f, rows, k_t, c_out)


def conv3d_frames(x, weights, bias, stride, padding, frame_keep=None, channel_keep=None,
                  feature_keep=None, taps=None):
    """Convolve ``x`` (T, C, H, W) skipping pruned frames, channels and features.

    ``frame_keep`` is bool[T], ``channel_keep`` bool[T, C], ``feature_keep``
    bool[T, H, W]; ``None`` means fully retained.  ``taps`` may carry a
    precomputed :func:`tap_matrix`.
    """
    t_in, c_in, h_in, w_in = x.shape
    c_out, _, k_t, k_h, k_w = weights.shape
    s_t, s_h, s_w = stride
    p_t, p_h, p_w = padding
    t_out, h_out, w_out = output_dims((t_in, h_in, w_in), (k_t, k_h, k_w), stride, padding)
    rows = h_out * w_out
    dtype = np.result_type(x.dtype, weights.dtype)
    hw = ((k_h, k_w), (s_h, s_w), (p_h, p_w))

    live = np.arange(t_in) if frame_keep is None else np.flatnonzero(frame_keep)
    if channel_keep is not None:
        live = live[channel_keep[live].any(axis=1)]
    if feature_keep is not None:
        live = live[feature_keep[live].any(axis=(1, 2))]

    blocks = None
    if live.size:
        # channels-last view of the retained frames
        frames = x[live].transpose(0, 2, 3, 1)
        ch = None if channel_keep is None or channel_keep[live].all() else channel_keep[live]
        fe = None if feature_keep is None or feature_keep[live].all() else feature_keep[live]
        taps = tap_matrix(weights) if taps is None else taps
        live_rows = None
        scale = None
        if fe is not None:
            scale = fe[..., None]
            if fe.mean() <= ROW_SKIP_CUTOFF:
                live_rows = _live_rows(fe, *hw, (h_out, w_out))
                if live_rows.mean() > ROW_SKIP_CUTOFF:
                    live_rows = None
        if ch is not None and ch.sum(axis=1).max() <= CHANNEL_COMPACT_CUTOFF * c_in:
            blocks = _blocks_channels(frames, ch, taps, *hw, (h_out, w_out), scale)
        else:
            if ch is not None:
                ch_scale = ch[:, None, None, :]
                scale = ch_scale if scale is None else scale & ch_scale
            if live_rows is not None:
                blocks = _blocks_rows(frames, live_rows, taps, *hw, (h_out, w_out), scale)
            else:
                blocks = _blocks_dense(frames, taps, *hw, (h_out, w_out), scale)

    out = np.empty((t_out, rows, c_out), dtype=dtype)
    out[:] = bias.astype(dtype)
    all_live = live.size == t_in
    if not all_live:
        slot = np.full(t_in, -1)
        slot[live] = np.arange(live.size)
    to = np.arange(t_out)
    for kt in range(k_t):
        ti = to * s_t + kt - p_t
        ok = (ti >= 0) & (ti < t_in)
        if all_live:
            # contiguous run of valid output frames; strided run of input frames
            if ok.any():
                lo, hi = np.flatnonzero(ok)[[0, -1]]
                out[lo:hi + 1] += blocks[ti[lo]:ti[hi] + 1:s_t, :, kt]
            continue
        ok[ok] &= slot[ti[ok]] >= 0
        if ok.any():
            out[to[ok]] += blocks[slot[ti[ok]], :, kt]
    return out.transpose(0, 2, 1).reshape(t_out, c_out, h_out, w_out)
