import logging
import sys

from services.config_service import apply_thread_limits, load_runtime_settings

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def main(argv=None) -> int:
    settings = load_runtime_settings()
    # thread caps only take effect if set before numpy loads
    apply_thread_limits(settings.threads)
    logging.basicConfig(level=settings.log_level, format=LOG_FORMAT, stream=sys.stderr)

    from routes.cli import main as cli_main

    return cli_main(argv)


# Run the app
if __name__ == "__main__":
    sys.exit(main())
