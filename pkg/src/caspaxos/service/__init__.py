"""Production deployment: daemons, wire framing, client library, CLI."""
