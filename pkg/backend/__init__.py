"""Head-squeezing lab backend: services, HTTP API and CLI."""
