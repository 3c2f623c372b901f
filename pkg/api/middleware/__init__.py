"""Request middleware: API-key check (``auth``) and request logging (``logging``)."""
