"""vidctl's contrib packages."""
