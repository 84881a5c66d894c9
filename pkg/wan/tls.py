"""
Lab TLS material for encrypted transfers.

A self-signed certificate is generated once with openssl and shared by
both peers; the client pins it instead of checking a hostname.
"""

import logging
import ssl
from pathlib import Path
from typing import Optional, Tuple

from errors import TransferError
from wan.shell import Shell

logger = logging.getLogger(__name__)

LAB_SUBJECT = "/CN=wanbench-lab"
CERT_NAME = "lab-cert.pem"
KEY_NAME = "lab-key.pem"


def ensure_lab_certificate(tls_dir: Optional[Path] = None, shell: Optional[Shell] = None) -> Tuple[Path, Path]:
    """Create the lab certificate if it does not exist yet.

    Args:
        tls_dir: Directory for the PEM files. Defaults to config.tls_dir.
        shell: Shell used to run openssl

    Returns:
        (certificate path, private key path)

    Raises:
        TransferError: openssl is missing or failed
    """
    if tls_dir is None:
        from config import config
        tls_dir = config.tls_dir
    tls_dir = Path(tls_dir)
    cert, key = tls_dir / CERT_NAME, tls_dir / KEY_NAME
    if cert.exists() and key.exists():
        return cert, key

    tls_dir.mkdir(parents=True, exist_ok=True)
    shell = shell or Shell()
    if not shell.which("openssl"):
        raise TransferError("TLS needs the openssl command to create the lab certificate")
    shell.run(
        [
            "openssl", "req", "-x509", "-newkey", "rsa:2048", "-nodes",
            "-keyout", str(key), "-out", str(cert),
            "-days", "3650", "-subj", LAB_SUBJECT,
        ],
        check=TransferError,
    )
    key.chmod(0o600)
    logger.info(f"Created lab certificate {cert}")
    return cert, key


def server_context(cert: Path, key: Path) -> ssl.SSLContext:
    context = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    context.load_cert_chain(str(cert), str(key))
    return context


def client_context(cert: Path) -> ssl.SSLContext:
    context = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    context.check_hostname = False
    context.load_verify_locations(cafile=str(cert))
    return context
