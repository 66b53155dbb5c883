"""Run the server: python -m headopt_server --backend echo --port 8040"""
import argparse

import uvicorn

from .app import ServerConfig, create_app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="headopt-server")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8040)
    parser.add_argument("--backend", choices=["echo", "analytic", "real"], default="echo")
    parser.add_argument("--target", help="TNS1 target tensor for the analytic backend")
    parser.add_argument("--model-path", help="pretrained weights for the real backend")
    parser.add_argument("--decoder-config", help="linear decoder JSON (weight 3x4, bias 3)")
    parser.add_argument("--w-mode", choices=["sigma", "one"], default="sigma")
    parser.add_argument("--cfg-scale", type=float, default=100.0)
    args = parser.parse_args(argv)
    config = ServerConfig(
        backend=args.backend,
        target_path=args.target,
        model_path=args.model_path,
        decoder_config=args.decoder_config,
        w_mode=args.w_mode,
        cfg_scale_default=args.cfg_scale,
    )
    uvicorn.run(create_app(config), host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
