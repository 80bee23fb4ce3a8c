/**
 * Client-side mirror of per-case reading time, for display and for
 * checking the server's accounting. The server's closed intervals are
 * authoritative; this never feeds back into the export.
 */

export class ActiveTimer {
  private spans: Array<[number, number]> = [];
  private openedAt: number | null = null;

  /** Milliseconds of active time, given the current clock reading. */
  elapsed(now: number): number {
    let total = 0;
    for (const [start, end] of this.spans) total += end - start;
    if (this.openedAt !== null) total += now - this.openedAt;
    return total;
  }

  get running(): boolean {
    return this.openedAt !== null;
  }

  start(now: number): void {
    if (this.openedAt === null) this.openedAt = now;
  }

  stop(now: number): void {
    if (this.openedAt !== null) {
      this.spans.push([this.openedAt, now]);
      this.openedAt = null;
    }
  }

  reset(): void {
    this.spans = [];
    this.openedAt = null;
  }
}
