"""Writes small KDD99-format CSV files with the full 10% file vocabulary."""
import csv

import numpy as np

from negmgan.data import KDD99_COLUMNS

SERVICES = (
    "http smtp finger domain_u auth telnet ftp eco_i ntp_u ecr_i other private pop_3 "
    "ftp_data rje time mtp link remote_job gopher ssh name whois domain login imap4 "
    "daytime ctf nntp shell IRC nnsp http_443 exec printer efs courier uucp klogin "
    "kshell echo discard systat supdup iso_tsap hostnames csnet_ns pop_2 sunrpc "
    "uucp_path netbios_ns netbios_ssn netbios_dgm sql_net vmnet bgp Z39_50 ldap "
    "netstat urh_i X11 urp_i pm_dump tftp_u tim_i red_i"
).split()
PROTOCOLS = ["tcp", "udp", "icmp"]
FLAGS = ["SF", "S1", "REJ", "S2", "S0", "S3", "RSTO", "RSTR", "RSTOS0", "OTH", "SH"]
LABELS = ["normal", "smurf", "neptune", "back", "satan", "ipsweep"]


def write_kdd_csv(path, rows_per_label=60, labels=LABELS, seed=0, header=True):
    """Every protocol, service and flag appears at least once; binary flags
    take both values except ``is_host_login``, which is constant at 0 as in
    the 10% file.  Labels carry the trailing dot of the raw dumps."""
    rng = np.random.default_rng(seed)
    n = rows_per_label * len(labels)
    out = []
    for i in range(n):
        label = labels[i % len(labels)]
        shift = labels.index(label)
        row = {}
        for c in KDD99_COLUMNS:
            if c.endswith("rate"):
                row[c] = f"{min(1.0, max(0.0, 0.1 * shift + 0.05 * rng.standard_normal())):.2f}"
            else:
                row[c] = str(int(abs(rng.normal(10 * shift, 3))))
        row["protocol_type"] = PROTOCOLS[i % 3]
        row["service"] = SERVICES[i % len(SERVICES)]
        row["flag"] = FLAGS[i % len(FLAGS)]
        row["land"] = str(i % 2)
        row["logged_in"] = str((i // 2) % 2)
        row["is_host_login"] = "0"
        row["is_guest_login"] = str((i // 3) % 2)
        row["label"] = label + "."
        out.append(row)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(KDD99_COLUMNS + ["label"])
        for r in out:
            w.writerow([r[c] for c in KDD99_COLUMNS] + [r["label"]])
    return path
