"""Clip directory format: a plain-text manifest plus raw little-endian
float32 payload files. Bit-exact by construction; see FORMATS.md.

    manifest.txt   key=value lines: version, T, H, W, dtype, text,
                   then one `field=<name> shape=<dims> bytes=<n>` per payload
    frames.bin     T*H*W*3 float32 RGB in [0,1]
    depth.bin      T*H*W   float32 camera-space depth (0 where invalid)
    points.bin     T*H*W*3 float32 first-camera-frame point map
    poses.bin      T*9     float32 [quat wxyz | translation | fov_x fov_y]
    mask.bin       T*H*W   float32 validity (0 or 1)

A dataset directory holds clip subdirectories plus index.txt, one relative
clip path per line.
"""

import os

import numpy as np

from .scenes import (VideoClip, SceneError, make_random_scene,
                     make_random_trajectory, make_trajectory, render_clip)

VERSION = 1
FIELDS = (("frames", 4), ("depth", 1), ("points", 4), ("poses", 1),
          ("mask", 1))


class FormatError(ValueError):
    pass


def _payload(clip):
    return {"frames": clip.frames, "depth": clip.depth, "points": clip.points,
            "poses": clip.poses, "mask": clip.valid}


def write_clip(clip, path):
    """Write one clip directory (creating it); lossless round trip."""
    clip.validate()
    if "\n" in clip.text:
        raise FormatError("clip text label cannot contain newlines")
    os.makedirs(path, exist_ok=True)
    arrays = _payload(clip)
    T, H, W, _ = clip.frames.shape
    lines = ["version=%d" % VERSION, "T=%d" % T, "H=%d" % H, "W=%d" % W,
             "dtype=float32", "text %s" % clip.text]
    for name, _ in FIELDS:
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        lines.append("field=%s shape=%s bytes=%d"
                     % (name, ",".join(str(s) for s in arr.shape), arr.nbytes))
        with open(os.path.join(path, name + ".bin"), "wb") as fh:
            fh.write(arr.tobytes())
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_manifest(path):
    mpath = os.path.join(path, "manifest.txt")
    if not os.path.exists(mpath):
        raise FormatError("missing manifest.txt in %s" % path)
    head, fields = {}, {}
    with open(mpath) as fh:
        for ln in fh.read().splitlines():
            if not ln:
                continue
            if ln.startswith("text "):
                head["text"] = ln[5:]
            elif ln.startswith("field="):
                parts = dict(p.split("=", 1) for p in ln.split())
                fields[parts["field"]] = parts
            else:
                k, _, v = ln.partition("=")
                head[k] = v
    for key in ("version", "T", "H", "W", "dtype"):
        if key not in head:
            raise FormatError("manifest missing key %r" % key)
    if int(head["version"]) != VERSION:
        raise FormatError("unsupported clip version %s" % head["version"])
    if head["dtype"] != "float32":
        raise FormatError("unsupported dtype %s" % head["dtype"])
    T = int(head["T"])
    if T < 1 or (T - 1) % 4 != 0:
        raise SceneError("manifest T=%d is not of the form 4(t-1)+1" % T)
    return head, fields, T, int(head["H"]), int(head["W"])


def _read_payload(path, name, info, shape):
    declared = tuple(int(s) for s in info["shape"].split(","))
    if declared != shape:
        raise FormatError("field %r shape %s does not match header %s"
                          % (name, declared, shape))
    nbytes = int(info["bytes"])
    if nbytes != int(np.prod(shape)) * 4:
        raise FormatError("field %r declares %d bytes for shape %s"
                          % (name, nbytes, shape))
    fpath = os.path.join(path, name + ".bin")
    if not os.path.exists(fpath):
        raise FormatError("missing payload %s.bin" % name)
    raw = open(fpath, "rb").read()
    if len(raw) != nbytes:
        raise FormatError("payload %s.bin: expected %d bytes, got %d"
                          % (name, nbytes, len(raw)))
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def read_clip(path):
    """Read a clip directory; format errors name the offending field."""
    head, fields, T, H, W = _read_manifest(path)

    want_shapes = {"frames": (T, H, W, 3), "depth": (T, H, W),
                   "points": (T, H, W, 3), "poses": (T, 9),
                   "mask": (T, H, W)}
    arrays = {}
    for name, _ in FIELDS:
        if name not in fields:
            raise FormatError("manifest missing field %r" % name)
        arrays[name] = _read_payload(path, name, fields[name],
                                     want_shapes[name])

    return VideoClip(arrays["frames"], arrays["depth"], arrays["mask"],
                     arrays["points"], arrays["poses"],
                     head.get("text", "")).validate()


def read_frames(path):
    """Frames payload alone from a clip-format directory; a minimal
    reference-frame payload (manifest + frames.bin) is enough."""
    head, fields, T, H, W = _read_manifest(path)
    if "frames" not in fields:
        raise FormatError("manifest missing field 'frames'")
    return _read_payload(path, "frames", fields["frames"], (T, H, W, 3))


def write_ref_frame(frame, path):
    """One RGB frame as a minimal single-frame clip payload."""
    frame = np.ascontiguousarray(frame, dtype="<f4")
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise FormatError("reference frame must be (H, W, 3), got %s"
                          % (frame.shape,))
    H, W, _ = frame.shape
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "frames.bin"), "wb") as fh:
        fh.write(frame.tobytes())
    lines = ["version=%d" % VERSION, "T=1", "H=%d" % H, "W=%d" % W,
             "dtype=float32", "text ",
             "field=frames shape=1,%d,%d,3 bytes=%d" % (H, W, frame.nbytes)]
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_outputs(out, path, text=""):
    """Sampler outputs in the clip payload format (mask all ones); the
    confidence map rides along as an extra conf.bin field, which read_clip
    ignores."""
    frames = np.asarray(out["frames"], dtype=np.float32)
    T, H, W, _ = frames.shape
    clip = VideoClip(frames, np.asarray(out["depth"], dtype=np.float32),
                     np.ones((T, H, W), dtype=np.float32),
                     np.asarray(out["points"], dtype=np.float32),
                     np.asarray(out["poses"], dtype=np.float32), text)
    write_clip(clip, path)
    conf = np.ascontiguousarray(out["conf"], dtype="<f4")
    with open(os.path.join(path, "conf.bin"), "wb") as fh:
        fh.write(conf.tobytes())
    with open(os.path.join(path, "manifest.txt"), "a") as fh:
        fh.write("field=conf shape=%s bytes=%d\n"
                 % (",".join(str(s) for s in conf.shape), conf.nbytes))


def write_index(dataset_dir, names):
    with open(os.path.join(dataset_dir, "index.txt"), "w") as fh:
        fh.write("\n".join(names) + ("\n" if names else ""))


def read_index(dataset_dir):
    ipath = os.path.join(dataset_dir, "index.txt")
    if not os.path.exists(ipath):
        raise FormatError("missing index.txt in %s" % dataset_dir)
    return [ln for ln in open(ipath).read().splitlines() if ln]


def load_dataset(dataset_dir):
    """Read every indexed clip into memory (desk-scale datasets are small)."""
    return [read_clip(os.path.join(dataset_dir, name))
            for name in read_index(dataset_dir)]


def generate_dataset(out_dir, n_clips, seed, frames, H, W):
    """Render n_clips random scene/trajectory pairs; per-clip determinism
    comes from a child seed per clip index."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i in range(n_clips):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        scene = make_random_scene(rng)
        tspec = make_random_trajectory(rng, frames, H, W)
        text = "%s %.1f prims=%d seed=%d.%d" % (
            tspec.kind, tspec.magnitude, len(scene.primitives), seed, i)
        clip = render_clip(scene, make_trajectory(tspec), H, W, text=text)
        name = "clip_%05d" % i
        write_clip(clip, os.path.join(out_dir, name))
        names.append(name)
    write_index(out_dir, names)
    return names
