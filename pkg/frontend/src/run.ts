import { execFileSync } from 'node:child_process';

/** Error from the native CLI, carrying its message and exit code. */
export class CliError extends Error {
  constructor(message: string, public readonly exitCode: number) {
    super(message);
    this.name = 'CliError';
  }
}

// override when the executable is not on PATH
const BIN = process.env.EPIBATCH_BIN ?? 'epibatch';

export function runCli(args: string[]): string {
  try {
    return execFileSync(BIN, args, {
      encoding: 'utf8',
      maxBuffer: 256 * 1024 * 1024,
      // warnings on stderr are not errors; keep them out of the parse path
      stdio: ['ignore', 'pipe', 'pipe'],
    });
  } catch (err) {
    const e = err as { status?: number | null; stderr?: string | Buffer; message?: string };
    const stderr = e.stderr ? e.stderr.toString() : '';
    // the CLI writes "epibatch: [ExcName:] message" as its final line
    const lines = stderr.split('\n').filter((l) => l.trim().length > 0);
    let message = lines.length > 0 ? lines[lines.length - 1] : (e.message ?? 'epibatch failed');
    message = message.replace(/^epibatch:\s*/, '');
    throw new CliError(message, e.status ?? -1);
  }
}
