"""crossprompt-seg console entry point."""

from crossprompt_seg.cli.app import app


def run() -> None:
    """Run the typer application (installed as the ``crossprompt-seg`` script)."""
    app()


if __name__ == "__main__":
    run()
