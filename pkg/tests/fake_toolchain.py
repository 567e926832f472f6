"""Stand-in for ffmpeg/ffprobe used by the ladder tests.

A "video" is a JSON file recording width, height and bitrate. Commands:

    cut SRC OUT                      4K pristine clip
    encode SRC OUT W H KBPS          achieved bitrate = KBPS * $FAKE_BITRATE_BIAS
    upscale SRC OUT W H              keeps the encoded bitrate
    probe FILE                       ffprobe-style JSON on stdout
    decode SRC OUT INDEX             one 10-bit 4:2:0 frame of the recorded size
    fail ...                         exits with status 3
"""
import json
import os
import sys


def main(argv):
    cmd = argv[0]
    if cmd == "cut":
        _, src, out = argv
        json.dump({"width": 3840, "height": 2160, "bit_rate": 30_000_000, "source": src}, open(out, "w"))
    elif cmd == "encode":
        _, src, out, w, h, kbps = argv
        bias = float(os.environ.get("FAKE_BITRATE_BIAS", "1.0"))
        json.dump({"width": int(w), "height": int(h), "bit_rate": int(float(kbps) * 1000 * bias)}, open(out, "w"))
    elif cmd == "upscale":
        _, src, out, w, h = argv
        info = json.load(open(src))
        info.update(width=int(w), height=int(h))
        json.dump(info, open(out, "w"))
    elif cmd == "probe":
        info = json.load(open(argv[1]))
        print(json.dumps({"streams": [{"width": info["width"], "height": info["height"],
                                       "bit_rate": str(info["bit_rate"])}],
                          "format": {"bit_rate": str(info["bit_rate"])}}))
    elif cmd == "decode":
        _, src, out, index = argv
        info = json.load(open(src))
        w, h = info["width"], info["height"]
        n = w * h + 2 * (w // 2) * (h // 2)
        with open(out, "wb") as fh:
            fh.write((int(index) % 1024).to_bytes(2, "little") * n)
    else:
        sys.stderr.write(f"unsupported command {cmd}\n")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
