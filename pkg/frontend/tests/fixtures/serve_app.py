"""Start a small guiding service for the frontend integration tests.

A deterministically initialized backbone plus a bias-nudged guide (so
text hints visibly change predictions) — no training, starts in
seconds.  Prints "READY <port>" once the app is constructed, then
serves until killed.
"""

import argparse
import socket

import torch
import uvicorn

import segguide as sg


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--port", type=int, default=0,
                        help="0 picks a free port")
    args = parser.parse_args()

    config = sg.ModelConfig(input_size=(32, 32), num_classes=5,
                            channel_widths=(8, 12, 16),
                            decoder_widths=(16, 12, 8),
                            split_points=("s1", "s2", "s3"))
    backbone = sg.build_model(config, seed=1,
                              class_names=sg.CLASS_NAMES[:5])
    table = sg.load_embeddings("hashed", 16)
    torch.manual_seed(4)
    guide = sg.GuideModel(backbone.split_shapes["s2"], "s2", sg.GuideMode(),
                          gru_hidden=8, embedding_dim=16)
    with torch.no_grad():
        guide.proj.bias.fill_(0.2)
    guide.eval()
    app = sg.create_app(backbone, guide, table)

    port = args.port
    if port == 0:
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()
    print(f"READY {port}", flush=True)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="error")


if __name__ == "__main__":
    main()
