/**
 * Sandbox-side entrypoint for one candidate attempt.
 *
 * The orchestrator copies this file into a scratch workdir, splicing the
 * candidate source into the quoted placeholder below as a JSON string
 * literal, then invokes `node runner.js manifest.json` (the manifest path
 * also arrives as the RUNNER_MANIFEST environment variable). The manifest
 * names the input tables, the output path, and the output contract.
 *
 * Flow: each declared CSV loads as an array of row objects (numeric columns
 * become numbers, key columns stay strings, rows sort by key), the arrays
 * bind under their manifest names in a fresh vm context, the candidate runs,
 * and whatever it assigned to `result` is serialized to the output path in
 * the canonical bit-exact form: exact contract header, rows sorted ascending
 * by key, shortest round-trip decimals, LF endings.
 *
 * Exit codes are normative; the execution evaluator keys off them:
 *   0  output written
 *   1  candidate code threw (stack trace on the error stream)
 *   2  manifest or data fault (bad arguments, unreadable files, bad CSV)
 *   3  candidate never assigned `result`
 *   4  `result` is not a keyed series of records
 */

import * as fs from "node:fs";
import * as vm from "node:vm";

/**
 * Replaced at materialization time with a JSON string literal of the
 * candidate source. JSON string escapes are a subset of JavaScript's, so the
 * spliced file always parses no matter what the candidate contains.
 */
const CANDIDATE_CODE: string = "{{CANDIDATE_CODE_JSON}}";

// Assembled from pieces so that materialization cannot rewrite the guard
// itself (splicing replaces every literal occurrence of the placeholder).
const UNSPLICED = ["{{CANDIDATE", "CODE", "JSON}}"].join("_");

type Cell = string | number | null;
type Row = Record<string, Cell>;

interface RunnerManifest {
  data_sources: Record<string, string>;
  output_path: string;
  key_columns: string[];
  value_column: string;
}

/** A fault with a dedicated exit code; printed as one "Name: message" line. */
class HarnessFault extends Error {
  constructor(name: string, message: string, readonly exitCode: number) {
    super(message);
    this.name = name;
  }
}

/** An exception thrown by the candidate itself; its stack is the payload. */
class CandidateFault {
  constructor(readonly detail: string) {}
}

const manifestFault = (message: string) => new HarnessFault("ManifestError", message, 2);
const dataFault = (message: string) => new HarnessFault("DataSourceError", message, 2);
const shapeFault = (message: string) => new HarnessFault("ResultShapeError", message, 4);
const missingResult = () =>
  new HarnessFault("MissingResultError", "no `result` variable was assigned by the candidate code", 3);

function message(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}

function describe(value: unknown): string {
  return value === null ? "null" : typeof value;
}

function loadManifest(path: string): RunnerManifest {
  let text: string;
  try {
    text = fs.readFileSync(path, "utf-8");
  } catch (err) {
    throw manifestFault(`cannot read manifest ${path}: ${message(err)}`);
  }
  let parsed: unknown;
  try {
    parsed = JSON.parse(text);
  } catch (err) {
    throw manifestFault(`manifest ${path} is not valid JSON: ${message(err)}`);
  }
  if (parsed === null || typeof parsed !== "object" || Array.isArray(parsed)) {
    throw manifestFault("manifest must be a JSON object");
  }
  const doc = parsed as Record<string, unknown>;
  const sources = doc.data_sources;
  if (
    sources === null ||
    typeof sources !== "object" ||
    Array.isArray(sources) ||
    !Object.values(sources).every((p) => typeof p === "string")
  ) {
    throw manifestFault("manifest field data_sources must map source names to file paths");
  }
  if (typeof doc.output_path !== "string" || doc.output_path === "") {
    throw manifestFault("manifest field output_path must be a file path");
  }
  const keyColumns = doc.key_columns;
  if (!Array.isArray(keyColumns) || keyColumns.length === 0 || !keyColumns.every((c) => typeof c === "string")) {
    throw manifestFault("manifest field key_columns must be a nonempty array of column names");
  }
  if (typeof doc.value_column !== "string" || doc.value_column === "") {
    throw manifestFault("manifest field value_column must be a column name");
  }
  return {
    data_sources: sources as Record<string, string>,
    output_path: doc.output_path,
    key_columns: keyColumns as string[],
    value_column: doc.value_column,
  };
}

const NUMBER_TOKEN = /^[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?$/;

function compareKeys(a: string[], b: string[]): number {
  for (let i = 0; i < a.length; i++) {
    if (a[i] < b[i]) return -1;
    if (a[i] > b[i]) return 1;
  }
  return 0;
}

/**
 * Parse one unquoted CSV table into row objects.
 *
 * A column becomes numeric when it has at least one non-empty cell, every
 * non-empty cell is a plain decimal token, and it is not named as a key
 * column (so instrument codes that happen to look numeric stay strings).
 * Empty cells are null either way. When all key columns are present the rows
 * sort by them, so candidates see a deterministic order regardless of how
 * the file was written.
 */
function parseTable(name: string, text: string, keyColumns: string[]): Row[] {
  const lines = text.split("\n");
  if (lines[lines.length - 1] === "") {
    lines.pop();
  }
  const cleaned = lines.map((line) => (line.endsWith("\r") ? line.slice(0, -1) : line));
  if (cleaned.length === 0 || cleaned[0] === "") {
    throw dataFault(`data source ${name} has no header row`);
  }
  const columns = cleaned[0].split(",");
  if (new Set(columns).size !== columns.length) {
    throw dataFault(`data source ${name} repeats a column name`);
  }
  const grid = cleaned.slice(1).map((line, i) => {
    const cells = line.split(",");
    if (cells.length !== columns.length) {
      throw dataFault(`data source ${name} row ${i + 2} has ${cells.length} fields, expected ${columns.length}`);
    }
    return cells;
  });
  const numeric = columns.map(
    (column, c) =>
      !keyColumns.includes(column) &&
      grid.some((cells) => cells[c] !== "") &&
      grid.every((cells) => cells[c] === "" || NUMBER_TOKEN.test(cells[c])),
  );
  const rows = grid.map((cells) => {
    const row: Row = {};
    columns.forEach((column, c) => {
      const cell = cells[c];
      row[column] = cell === "" ? null : numeric[c] ? Number(cell) : cell;
    });
    return row;
  });
  if (keyColumns.every((column) => columns.includes(column))) {
    rows.sort((a, b) =>
      compareKeys(
        keyColumns.map((k) => String(a[k])),
        keyColumns.map((k) => String(b[k])),
      ),
    );
  }
  return rows;
}

/**
 * Run the candidate in a fresh context and read back its `result`.
 *
 * The probe script runs in the same context afterwards, so it sees plain
 * global assignments and top-level let/const declarations alike; a
 * ReferenceError inside the probe is the "never assigned" signal.
 */
function runCandidate(code: string, tables: Record<string, Row[]>): unknown {
  const context = vm.createContext({ ...tables, console });
  try {
    vm.runInContext(code, context, { filename: "candidate.js" });
  } catch (err) {
    // Errors born inside the candidate's context fail `instanceof Error`
    // here (each context has its own Error constructor), so read the stack
    // structurally.
    const stack = (err as { stack?: unknown } | null)?.stack;
    throw new CandidateFault(typeof stack === "string" && stack !== "" ? stack : String(err));
  }
  const probe = vm.runInContext(
    "(() => { try { return { present: true, value: result }; } catch (_err) { return { present: false, value: undefined }; } })()",
    context,
    { filename: "result-probe.js" },
  ) as { present: boolean; value: unknown };
  if (!probe.present) {
    throw missingResult();
  }
  return probe.value;
}

/**
 * Render a finite value in the canonical decimal form.
 *
 * String() prints integral doubles as bare digits ("11", never "11.0") and
 * everything else in the shortest round-trip representation, which for
 * magnitudes in [1e-4, 1e16) or exactly 0 is byte-identical to the
 * orchestrator's own serializer; the toy data stays inside that zone.
 */
function formatValue(value: number): string {
  return String(value);
}

function collectRecords(value: unknown): unknown[] {
  if (Array.isArray(value)) {
    return value;
  }
  if (value !== null && typeof value === "object" && Symbol.iterator in value) {
    return Array.from(value as Iterable<unknown>);
  }
  throw shapeFault(`result must be an array of records, got ${describe(value)}`);
}

/**
 * Check the candidate's records against the output contract and serialize.
 *
 * Every record needs a string field per key column and a finite number (or
 * null/undefined for missing) under the value column; keys must be unique
 * and must not contain row or field separators. Rows come out sorted
 * ascending by key, so the same series always yields the same bytes.
 */
function serializeResult(value: unknown, manifest: RunnerManifest): string {
  const { key_columns: keyColumns, value_column: valueColumn } = manifest;
  const entries: Array<{ key: string[]; value: number | null }> = [];
  collectRecords(value).forEach((record, i) => {
    if (record === null || typeof record !== "object") {
      throw shapeFault(`result record ${i} is not an object (${describe(record)})`);
    }
    const fields = record as Record<string, unknown>;
    const key = keyColumns.map((column) => {
      const token = fields[column];
      if (typeof token !== "string") {
        throw shapeFault(`result record ${i} needs a string '${column}' field, got ${describe(token)}`);
      }
      if (/[,\r\n]/.test(token)) {
        throw shapeFault(`key token ${JSON.stringify(token)} in record ${i} would corrupt the CSV row`);
      }
      return token;
    });
    const raw = fields[valueColumn];
    let v: number | null;
    if (raw === null || raw === undefined) {
      v = null;
    } else if (typeof raw === "number") {
      if (!Number.isFinite(raw)) {
        throw shapeFault(`value ${String(raw)} in record ${i} is not finite`);
      }
      v = raw;
    } else {
      throw shapeFault(`result record ${i} needs a number or null '${valueColumn}' field, got ${describe(raw)}`);
    }
    entries.push({ key, value: v });
  });
  entries.sort((a, b) => compareKeys(a.key, b.key));
  const seen = new Set<string>();
  for (const entry of entries) {
    const joined = entry.key.join(",");
    if (seen.has(joined)) {
      throw shapeFault(`result repeats the key (${joined})`);
    }
    seen.add(joined);
  }
  const lines = [[...keyColumns, valueColumn].join(",")];
  for (const entry of entries) {
    lines.push(`${entry.key.join(",")},${entry.value === null ? "" : formatValue(entry.value)}`);
  }
  return lines.join("\n") + "\n";
}

function main(): number {
  try {
    if (CANDIDATE_CODE === UNSPLICED) {
      throw manifestFault("candidate code was never spliced into this template");
    }
    const manifestPath = process.argv[2] ?? process.env.RUNNER_MANIFEST;
    if (!manifestPath) {
      throw manifestFault("usage: node runner.js <manifest.json> (or set RUNNER_MANIFEST)");
    }
    const manifest = loadManifest(manifestPath);
    const tables: Record<string, Row[]> = {};
    for (const [name, path] of Object.entries(manifest.data_sources)) {
      let text: string;
      try {
        text = fs.readFileSync(path, "utf-8");
      } catch (err) {
        throw dataFault(`cannot read data source ${name} at ${path}: ${message(err)}`);
      }
      tables[name] = parseTable(name, text, manifest.key_columns);
    }
    const result = runCandidate(CANDIDATE_CODE, tables);
    const serialized = serializeResult(result, manifest);
    try {
      fs.writeFileSync(manifest.output_path, serialized, "utf-8");
    } catch (err) {
      throw manifestFault(`cannot write output to ${manifest.output_path}: ${message(err)}`);
    }
    return 0;
  } catch (err) {
    if (err instanceof CandidateFault) {
      process.stderr.write(err.detail + "\n");
      return 1;
    }
    if (err instanceof HarnessFault) {
      process.stderr.write(`${err.name}: ${err.message}\n`);
      return err.exitCode;
    }
    const detail = err instanceof Error && err.stack ? err.stack : String(err);
    process.stderr.write(`HarnessError: unexpected fault: ${detail}\n`);
    return 2;
  }
}

// No process.exit(): letting the loop drain guarantees the error stream is
// flushed even when it is a pipe, and a bare vm context has no timers that
// could keep the process alive.
process.exitCode = main();
