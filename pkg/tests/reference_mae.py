"""A plain MAE forward written from scratch for cross-checking.

Shares nothing with the package except the parameter tensors it is handed.
Patches come from ``F.unfold``, the decoder runs on the full raster-ordered
sequence with mask tokens scattered in (the usual MAE unshuffle), and the loss
is the per-patch mean squared error averaged over masked patches.
"""

import math

import torch
import torch.nn.functional as F


def sincos_2d(dim, grid):
    """Closed-form 2-D sine-cosine table, one row per raster position."""
    quarter = dim // 4
    rows = []
    for r in range(grid):
        for c in range(grid):
            row = []
            for coord in (c, r):
                freqs = [1.0 / 10000 ** (i / quarter) for i in range(quarter)]
                row += [math.sin(coord * f) for f in freqs] + [math.cos(coord * f) for f in freqs]
            rows.append(row)
    return torch.tensor(rows, dtype=torch.float64)


def to_patches(imgs, p):
    B, H, W, C = imgs.shape
    cols = F.unfold(imgs.permute(0, 3, 1, 2), kernel_size=p, stride=p)  # B, C*p*p, L
    L = cols.shape[-1]
    return cols.reshape(B, C, p, p, L).permute(0, 4, 2, 3, 1).reshape(B, L, p * p * C)


def _block(P, pre, x, heads):
    d = x.shape[-1]
    h = F.layer_norm(x, (d,), P[pre + "norm1.weight"], P[pre + "norm1.bias"], eps=1e-6)
    qkv = h @ P[pre + "attn.qkv.weight"].T + P[pre + "attn.qkv.bias"]
    q, k, v = qkv.split(d, dim=-1)
    B, T, _ = x.shape
    hd = d // heads

    def split(t):
        return t.reshape(B, T, heads, hd).transpose(1, 2)

    a = torch.softmax(split(q) @ split(k).transpose(-1, -2) / math.sqrt(hd), dim=-1)
    o = (a @ split(v)).transpose(1, 2).reshape(B, T, d)
    x = x + o @ P[pre + "attn.proj.weight"].T + P[pre + "attn.proj.bias"]
    h = F.layer_norm(x, (d,), P[pre + "norm2.weight"], P[pre + "norm2.bias"], eps=1e-6)
    h = F.gelu(h @ P[pre + "mlp.fc1.weight"].T + P[pre + "mlp.fc1.bias"])
    return x + h @ P[pre + "mlp.fc2.weight"].T + P[pre + "mlp.fc2.bias"]


def mae_loss(P, cfg, imgs, ids_keep, ids_mask, norm_pix=True):
    p, d, dd = cfg.patch_size, cfg.embed_dim, cfg.decoder_dim
    B = imgs.shape[0]
    N = cfg.num_patches
    dtype = imgs.dtype
    patches = to_patches(imgs, p)
    pos = sincos_2d(d, cfg.grid_size).to(dtype)
    x = patches @ P["patch_embed.weight"].T + P["patch_embed.bias"] + pos
    x = torch.stack([x[b, ids_keep[b]] for b in range(B)])
    cls = P["cls_token"].expand(B, 1, d)
    x = torch.cat([cls, x], dim=1)
    for i in range(cfg.encoder_depth):
        x = _block(P, f"blocks.{i}.", x, cfg.num_heads)
    vis = x[:, 1:]
    vis = F.layer_norm(vis, (d,), P["decoder_norm_in.weight"], P["decoder_norm_in.bias"], eps=1e-6)
    vis = vis @ P["decoder_embed.weight"].T + P["decoder_embed.bias"]
    seq = P["mask_token"].expand(B, N, dd).clone()
    for b in range(B):
        seq[b, ids_keep[b]] = vis[b]
    seq = seq + sincos_2d(dd, cfg.grid_size).to(dtype)
    for i in range(cfg.decoder_depth):
        seq = _block(P, f"decoder_blocks.{i}.", seq, cfg.decoder_heads)
    seq = F.layer_norm(seq, (dd,), P["decoder_norm.weight"], P["decoder_norm.bias"], eps=1e-6)
    pred = seq @ P["decoder_pred.weight"].T + P["decoder_pred.bias"]
    target = patches
    if norm_pix:
        mean = target.mean(dim=-1, keepdim=True)
        var = target.var(dim=-1, keepdim=True)
        target = (target - mean) / (var + 1.0e-6) ** 0.5
    per_patch = ((pred - target) ** 2).mean(dim=-1)
    mask = torch.zeros(B, N, dtype=dtype)
    for b in range(B):
        mask[b, ids_mask[b]] = 1.0
    return (per_patch * mask).sum() / mask.sum()


def mae_random_masking(B, N, mask_ratio, gen):
    """MAE-style masking: argsort uniform noise, keep the lowest-noise tokens."""
    len_keep = int(N * (1 - mask_ratio) + 1e-9)
    noise = torch.rand(B, N, generator=gen)
    shuffle = torch.argsort(noise, dim=1)
    return shuffle[:, :len_keep], shuffle[:, len_keep:]


def train_reference(P_init, cfg, images, epochs, batch_size, base_lr, warmup, seed,
                    weight_decay=0.05, betas=(0.9, 0.95), mask_ratio=0.75):
    """Plain MAE training on already-normalized B x H x W x C images.

    Own data order, own masking noise, own warmup-cosine schedule.  Returns the
    per-epoch mean reconstruction loss.
    """
    P = {k: v.detach().clone().requires_grad_(True) for k, v in P_init.items()}
    decay = [v for k, v in P.items() if v.ndim > 1 and not k.endswith("_token")]
    no_decay = [v for k, v in P.items() if v.ndim <= 1 or k.endswith("_token")]
    opt = torch.optim.AdamW([{"params": decay, "weight_decay": weight_decay},
                             {"params": no_decay, "weight_decay": 0.0}], lr=base_lr, betas=betas)
    gen = torch.Generator().manual_seed(seed)
    M = images.shape[0]
    steps_per_epoch = math.ceil(M / batch_size)
    curve = []
    for epoch in range(epochs):
        perm = torch.randperm(M, generator=gen)
        total = 0.0
        for s in range(steps_per_epoch):
            t = epoch + s / steps_per_epoch
            if t < warmup:
                lr = base_lr * t / warmup
            else:
                lr = base_lr * 0.5 * (1 + math.cos(math.pi * (t - warmup) / (epochs - warmup)))
            for g in opt.param_groups:
                g["lr"] = lr
            idx = perm[s * batch_size:(s + 1) * batch_size]
            keep, masked = mae_random_masking(len(idx), cfg.num_patches, mask_ratio, gen)
            loss = mae_loss(P, cfg, images[idx], keep, masked)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / M)
    return curve
