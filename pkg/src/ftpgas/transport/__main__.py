"""Serve one bare rank: ``python -m ftpgas.transport --rank R --ranks N --base-port P``."""

from .tcp import main

main()
