#pragma once

#include <stdexcept>
#include <string>

namespace tdmqtt
{
struct Error : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

// codec
struct InvalidPacket : Error
{
    using Error::Error;
};

struct MalformedFilter : Error
{
    using Error::Error;
};

struct InvalidTopicName : Error
{
    using Error::Error;
};

struct InvalidBrokerRef : Error
{
    using Error::Error;
};

// transport
struct ConnectionClosed : Error
{
    using Error::Error;
};

struct ProtocolError : Error
{
    using Error::Error;
};

struct ConnectFailed : Error
{
    using Error::Error;
};

// roles
struct BrokerUnreachable : Error
{
    using Error::Error;
};

struct MasterUnreachable : Error
{
    using Error::Error;
};

struct NoSuchTopic : Error
{
    using Error::Error;
};

struct TopicNotAccepted : Error
{
    using Error::Error;
};

// eval
struct UnstableQueue : Error
{
    using Error::Error;
};

struct ConfigError : Error
{
    using Error::Error;
};
} // namespace tdmqtt
