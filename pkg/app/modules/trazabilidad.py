# app/modules/trazabilidad.py
"""
Módulo de trazabilidad de ejecuciones del laboratorio MLS.
Registra cada corrida de la CLI (ok o no) en un ledger SQLite y permite consultarlo.
"""

import os
import sqlite3
import json
import datetime
from contextlib import closing
from threading import Lock

# Lock para evitar condiciones de carrera en escrituras concurrentes
_lock = Lock()

# Rutas ya inicializadas (tabla + índices creados)
_ready: set[str] = set()


def _db_path() -> str:
    """Ruta del archivo SQLite (se puede mover vía .env con TRACE_DB_PATH)."""
    return os.getenv("TRACE_DB_PATH", "trace.db")


def enabled() -> bool:
    return os.getenv("TRACE_ENABLED", "true").lower() in ("1", "true", "yes")


def _conn():
    """
    Entrada:
        - Ninguna.
    Qué hace:
        - Abre una conexión SQLite hacia _db_path(), creando la tabla la primera vez.
        - Quien la pide la cierra (contextlib.closing); "with conn" solo confirma la transacción.
        - check_same_thread=False permite usarla desde los hilos del pool, serializados por _lock.
    Salida esperada:
        - Objeto de conexión sqlite3 listo para ejecutar queries.
    """
    path = _db_path()
    conn = sqlite3.connect(path, check_same_thread=False)
    if path not in _ready:
        try:
            _init(conn)
        except sqlite3.Error:
            conn.close()
            raise
        _ready.add(path)
    return conn


def _init(conn: sqlite3.Connection) -> None:
    """
    Entrada:
        - conn: conexión abierta.
    Qué hace:
        - Crea la tabla 'corridas' e índices si no existen; aplica PRAGMA de WAL.
    Salida esperada:
        - Base de datos lista para registrar trazas.
    """
    with conn as c:
        try:
            c.execute("PRAGMA journal_mode=WAL;")
            c.execute("PRAGMA synchronous=NORMAL;")
        except sqlite3.DatabaseError:
            pass

        c.execute("""
        CREATE TABLE IF NOT EXISTS corridas (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            ts TEXT NOT NULL,           -- ISO8601 UTC con sufijo 'Z'
            command TEXT NOT NULL,      -- subcomando (sample, fit, rates, ...)
            action TEXT,                -- detalle lógico (ej: fill)
            params_json TEXT,           -- configuración resuelta serializada a JSON
            ok INTEGER NOT NULL,        -- 1=éxito, 0=error
            code INTEGER,               -- código de salida
            message TEXT,               -- detalle de error o resumen
            output_dir TEXT             -- carpeta de artefactos
        )
        """)
        c.execute("CREATE INDEX IF NOT EXISTS idx_corr_ts ON corridas(ts)")
        c.execute("CREATE INDEX IF NOT EXISTS idx_corr_cmd ON corridas(command)")


def _utc_now() -> datetime.datetime:
    return datetime.datetime.now(datetime.timezone.utc).replace(tzinfo=None)


def log_exec(*, command: str, action: str | None = None, params: dict | None = None,
             ok: bool = False, code: int | None = None, message: str | None = None,
             output_dir: str | None = None) -> int | None:
    """
    Entrada:
      - command (str): subcomando ejecutado.
      - action (str|None): detalle lógico (ej. 'fill' para rates).
      - params (dict|None): configuración resuelta.
      - ok (bool): True si la corrida terminó con éxito.
      - code (int|None): código de salida (0, 1, 2).
      - message (str|None): mensaje breve asociado al resultado.
      - output_dir (str|None): carpeta de artefactos.
    Qué hace:
      - Inserta una fila en 'corridas' con fecha/hora UTC ISO8601 ('Z').
    Salida esperada:
      - ID (int) del registro insertado; None si TRACE_ENABLED está apagado.
    """
    if not enabled():
        return None
    ts = _utc_now().isoformat(timespec="seconds") + "Z"
    pj = json.dumps(params or {}, ensure_ascii=False, sort_keys=True, default=str)
    with _lock, closing(_conn()) as conn, conn as c:
        cur = c.execute(
            "INSERT INTO corridas (ts,command,action,params_json,ok,code,message,output_dir) "
            "VALUES (?,?,?,?,?,?,?,?)",
            (ts, command, action, pj, 1 if ok else 0, code, (message or "")[:1000], output_dir)
        )
        return cur.lastrowid


def list_recent(limit: int = 50) -> list[dict]:
    """
    Entrada:
      - limit (int): cantidad máxima de registros (default: 50).
    Qué hace:
      - Devuelve las últimas corridas, de la más reciente a la más antigua.
    Salida esperada:
      - Lista de diccionarios: id, ts, command, action, params, ok, code, message, output_dir.
    """
    with closing(_conn()) as conn, conn as c:
        rows = c.execute(
            "SELECT id,ts,command,action,params_json,ok,code,message,output_dir "
            "FROM corridas ORDER BY id DESC LIMIT ?",
            (limit,)
        ).fetchall()

    out: list[dict] = []
    for r in rows:
        out.append({
            "id": r[0],
            "ts": r[1],
            "command": r[2],
            "action": r[3],
            "params": json.loads(r[4] or "{}"),
            "ok": bool(r[5]),
            "code": r[6],
            "message": r[7],
            "output_dir": r[8],
        })
    return out


def prune_old_records(retention_days: int | None = None) -> int:
    """
    Entrada:
        - retention_days (int|None): días a conservar; por defecto TRACE_RETENTION_DAYS o 180.
    Qué hace:
        - Elimina las corridas con ts anterior al umbral (UTC).
    Salida esperada:
        - int: cantidad de filas eliminadas.
    """
    if retention_days is None:
        try:
            retention_days = int(os.getenv("TRACE_RETENTION_DAYS", "180"))
        except ValueError:
            retention_days = 180

    cutoff = (_utc_now() - datetime.timedelta(days=retention_days)).isoformat(timespec="seconds") + "Z"

    with _lock, closing(_conn()) as conn, conn as c:
        cur = c.execute("DELETE FROM corridas WHERE ts < ?", (cutoff,))
        return cur.rowcount
