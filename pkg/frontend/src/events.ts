import type { EventEnvelope } from "./types.js";

// Server-sent event subscription over fetch streaming so the same code runs
// in the browser and under node-based tests. Delivery is at-least-once;
// consumers dedupe by seq and resume from their cursor on reconnect.

export async function* sseEvents(
  baseUrl: string, token: string, since: number,
  signal: AbortSignal,
): AsyncGenerator<EventEnvelope> {
  const response = await fetch(
    `${baseUrl}/api/events?since=${since}`,
    { headers: { "Authorization": `Bearer ${token}` }, signal });
  if (!response.ok || !response.body) {
    throw new Error(`event stream failed: ${response.status}`);
  }
  const reader = response.body.getReader();
  const decoder = new TextDecoder();
  let buffer = "";
  while (true) {
    const { done, value } = await reader.read();
    if (done) return;
    buffer += decoder.decode(value, { stream: true });
    let boundary;
    while ((boundary = buffer.indexOf("\n\n")) >= 0) {
      const frame = buffer.slice(0, boundary);
      buffer = buffer.slice(boundary + 2);
      for (const line of frame.split("\n")) {
        if (line.startsWith("data:")) {
          yield JSON.parse(line.slice(5)) as EventEnvelope;
        }
      }
    }
  }
}

export class EventFeed {
  cursor = 0;
  connected = false;
  private controller: AbortController | null = null;

  constructor(
    private baseUrl: string,
    private token: string,
    private onEvent: (envelope: EventEnvelope) => void | Promise<void>,
    private onStateChange?: (connected: boolean) => void,
  ) {}

  start(): void {
    if (this.controller) return;
    this.controller = new AbortController();
    void this.pump(this.controller.signal);
  }

  stop(): void {
    this.controller?.abort();
    this.controller = null;
    this.setConnected(false);
  }

  private setConnected(value: boolean): void {
    if (this.connected !== value) {
      this.connected = value;
      this.onStateChange?.(value);
    }
  }

  private async pump(signal: AbortSignal): Promise<void> {
    while (!signal.aborted) {
      try {
        this.setConnected(true);
        for await (const envelope of sseEvents(
            this.baseUrl, this.token, this.cursor, signal)) {
          if (envelope.seq <= this.cursor) continue; // dedupe on redelivery
          this.cursor = envelope.seq;
          await this.onEvent(envelope);
        }
      } catch (err) {
        if (signal.aborted) break;
      }
      this.setConnected(false);
      if (!signal.aborted) {
        await new Promise((resolve) => setTimeout(resolve, 300));
      }
    }
  }
}
