//! Broker boundary over a real MQTT server.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use rumqttc::{Client, Event, LastWill as MqttWill, MqttOptions, Packet, QoS};

use crate::broker::{valid_filter, Broker, BrokerError, LastWill, Session};

#[derive(Debug, Clone)]
pub struct MqttBroker {
    pub host: String,
    pub port: u16,
    pub keep_alive: Duration,
}

impl MqttBroker {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Self {
            host: host.into(),
            port,
            keep_alive: Duration::from_secs(5),
        }
    }
}

enum Incoming {
    Message(String, Vec<u8>),
    Lost,
}

struct MqttSession {
    id: String,
    client: Client,
    rx: Receiver<Incoming>,
    lost: bool,
}

impl Broker for MqttBroker {
    fn connect(&self, client_id: &str, will: Option<LastWill>) -> Result<Box<dyn Session>, BrokerError> {
        let mut opts = MqttOptions::new(client_id, &self.host, self.port);
        opts.set_keep_alive(self.keep_alive);
        opts.set_max_packet_size(1 << 20, 1 << 20);
        if let Some(w) = will {
            opts.set_last_will(MqttWill::new(w.topic, w.payload, QoS::AtLeastOnce, false));
        }
        let (client, mut connection) = Client::new(opts, 256);
        let (tx, rx) = mpsc::channel();
        let (ready_tx, ready_rx) = mpsc::channel();
        thread::Builder::new()
            .name(format!("mqtt-{client_id}"))
            .spawn(move || {
                let mut ready = Some(ready_tx);
                for event in connection.iter() {
                    match event {
                        Ok(Event::Incoming(Packet::ConnAck(_))) => {
                            if let Some(r) = ready.take() {
                                let _ = r.send(Ok(()));
                            }
                        }
                        Ok(Event::Incoming(Packet::Publish(p))) => {
                            if tx.send(Incoming::Message(p.topic, p.payload.to_vec())).is_err() {
                                return;
                            }
                        }
                        Ok(Event::Outgoing(rumqttc::Outgoing::Disconnect)) => return,
                        Ok(_) => {}
                        Err(e) => {
                            if let Some(r) = ready.take() {
                                let _ = r.send(Err(e.to_string()));
                            }
                            let _ = tx.send(Incoming::Lost);
                            return;
                        }
                    }
                }
            })
            .map_err(|e| BrokerError::Unreachable(e.to_string()))?;
        match ready_rx.recv_timeout(Duration::from_secs(10)) {
            Ok(Ok(())) => {}
            Ok(Err(e)) => return Err(BrokerError::Unreachable(e)),
            Err(_) => return Err(BrokerError::Unreachable("no connection acknowledgment".into())),
        }
        Ok(Box::new(MqttSession {
            id: client_id.to_string(),
            client,
            rx,
            lost: false,
        }))
    }
}

impl Session for MqttSession {
    fn client_id(&self) -> &str {
        &self.id
    }

    fn subscribe(&mut self, filter: &str) -> Result<(), BrokerError> {
        if !valid_filter(filter) {
            return Err(BrokerError::BadFilter(filter.to_string()));
        }
        self.client
            .subscribe(filter, QoS::AtLeastOnce)
            .map_err(|_| BrokerError::Disconnected)
    }

    fn publish(&mut self, topic: &str, payload: &[u8]) -> Result<(), BrokerError> {
        if self.lost {
            return Err(BrokerError::Disconnected);
        }
        self.client
            .publish(topic, QoS::AtLeastOnce, false, payload.to_vec())
            .map_err(|_| BrokerError::Disconnected)
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<(String, Vec<u8>)>, BrokerError> {
        if self.lost {
            return Err(BrokerError::Disconnected);
        }
        match self.rx.recv_timeout(timeout) {
            Ok(Incoming::Message(t, p)) => Ok(Some((t, p))),
            Ok(Incoming::Lost) | Err(RecvTimeoutError::Disconnected) => {
                self.lost = true;
                Err(BrokerError::Disconnected)
            }
            Err(RecvTimeoutError::Timeout) => Ok(None),
        }
    }

    fn disconnect(self: Box<Self>) {
        let _ = self.client.disconnect();
    }
}
